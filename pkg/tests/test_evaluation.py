import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slicebrain.evaluation import (
    ConfusionCounts,
    EvalOptions,
    comparison_table,
    confusion,
    dice,
    evaluate_dataset,
    format_table,
    metrics,
    nearest_rank,
    sensitivity,
    specificity,
    timing_stats,
)
from slicebrain.models import UNetConfig, unet_init
from slicebrain.synth import make_dataset


def scalar_metrics(pred, truth):
    """Loop oracle written from the definitions."""
    tp = fp = tn = fn = 0
    for p, r in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if p and r:
            tp += 1
        elif p:
            fp += 1
        elif r:
            fn += 1
        else:
            tn += 1
    d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    s = None if tp + fn == 0 else tp / (tp + fn)
    sp = None if tn + fp == 0 else tn / (tn + fp)
    return (tp, fp, tn, fn), d, s, sp


def test_dice_worked_case():
    assert dice(ConfusionCounts(tp=80, fp=20, tn=0, fn=20)) == pytest.approx(0.8, abs=1e-12)


def test_identical_and_disjoint():
    m = np.zeros((4, 4, 2), np.uint8)
    m[1:3, 1:3] = 1
    c = confusion(m, m)
    assert dice(c) == sensitivity(c) == specificity(c) == 1.0
    c = confusion(1 - m, m)
    assert dice(c) == 0.0 and sensitivity(c) == 0.0 and specificity(c) == 0.0


def test_both_empty_is_degenerate():
    z = np.zeros((3, 3, 3), np.uint8)
    c = confusion(z, z)
    assert c.degenerate and dice(c) == 1.0
    assert sensitivity(c) is None and specificity(c) == 1.0
    assert specificity(confusion(np.ones((2, 2, 1)), np.ones((2, 2, 1)))) is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((3, 3, 3)), np.zeros((3, 3, 2)))


def test_random_pairs_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        shape = tuple(rng.integers(1, 7, 3))
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        truth = (rng.random(shape) < rng.random()).astype(np.uint8)
        counts, d, s, sp = scalar_metrics(pred, truth)
        c = confusion(pred, truth)
        assert (c.tp, c.fp, c.tn, c.fn) == counts
        assert metrics(c) == {"dice": d, "sensitivity": s, "specificity": sp}


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (5, 4, 3), elements=st.integers(0, 1)), arrays(np.uint8, (5, 4, 3), elements=st.integers(0, 1)))
def test_metric_properties(a, b):
    assert dice(confusion(a, b)) == dice(confusion(b, a))
    for v in metrics(confusion(a, b)).values():
        assert v is None or 0.0 <= v <= 1.0
    assert confusion(a, b).total == a.size
    # complementing both masks turns sensitivity into specificity
    assert sensitivity(confusion(a, b)) == specificity(confusion(1 - a, 1 - b))


def test_confusion_addition():
    c = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
    assert c == ConfusionCounts(11, 22, 33, 44)


def test_nearest_rank_percentiles():
    values = list(range(1, 21))
    assert nearest_rank(values, 0.95) == 19
    assert nearest_rank(values, 0.50) == 10
    assert nearest_rank([5.0], 0.95) == 5.0
    t = timing_stats([0.3, 0.1, 0.2])
    assert (t.n, t.p50, t.p95) == (3, 0.2, 0.3)
    assert t.mean == pytest.approx(0.2) and t.total == pytest.approx(0.6)
    with pytest.raises(ValueError):
        timing_stats([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60))
def test_p95_is_an_observed_rank(values):
    t = timing_stats(values)
    s = sorted(values)
    assert t.p95 in s
    assert sum(v <= t.p95 for v in s) >= math.ceil(0.95 * len(s))
    assert t.p50 <= t.p95 <= s[-1]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return make_dataset(0, 2, 3, tmp_path_factory.mktemp("eval"), seed=11, shape=(32, 32, 8))


def test_evaluate_dataset_report(corpus, tmp_path):
    ckpt = unet_init(UNetConfig(depth=1, base_features=2), 0)
    rep = evaluate_dataset(ckpt, corpus, ["normal_test", "challenging_test"], out_dir=tmp_path)
    assert rep.method == "U-Net" and rep.options["postprocess"] is False
    assert len(rep.rows) == 5 and len(rep.slice_rows) == 40
    agg = rep.aggregates()
    for split, n in [("normal_test", 2), ("challenging_test", 3)]:
        rows = [r for r in rep.rows if r.split == split]
        dices = [r.dice for r in rows]
        assert agg[split]["n_stacks"] == n
        assert agg[split]["dice"]["mean"] == pytest.approx(np.mean(dices))
        assert agg[split]["dice"]["std"] == pytest.approx(np.std(dices, ddof=1))
        for r in rows:
            c = ConfusionCounts(r.tp, r.fp, r.tn, r.fn)
            assert r.dice == dice(c) and c.total == 32 * 32 * 8
    with open(tmp_path / "report.csv", newline="") as fh:
        assert [row["stack_id"] for row in csv.DictReader(fh)] == [r.stack_id for r in rep.rows]
    with open(tmp_path / "boxplot.csv", newline="") as fh:
        box = list(csv.DictReader(fh))
    assert len(box) == len(rep.boxplot_rows())
    assert {b["metric"] for b in box} <= {"dice", "sensitivity", "specificity"}
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["std_over"].startswith("stacks")
    report_text = (tmp_path / "report.csv").read_text() + (tmp_path / "report.json").read_text()
    assert "seconds" not in report_text
    assert "seconds_per_stack" in (tmp_path / "timing.csv").read_text()


def test_evaluate_dataset_deterministic(corpus, tmp_path):
    ckpt = unet_init(UNetConfig(depth=1, base_features=2), 4)
    evaluate_dataset(ckpt, corpus, "challenging_test", out_dir=tmp_path / "a")
    evaluate_dataset(ckpt, corpus, "challenging_test", out_dir=tmp_path / "b")
    for name in ["report.csv", "report.json", "boxplot.csv", "slices.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exclude_corrupted(corpus):
    ckpt = unet_init(UNetConfig(depth=1, base_features=2), 0)
    full = evaluate_dataset(ckpt, corpus, "challenging_test")
    part = evaluate_dataset(ckpt, corpus, "challenging_test", EvalOptions(exclude_corrupted=True))
    for a, b in zip(full.rows, part.rows):
        meta = corpus.load_meta(next(e for e in corpus.entries if e.stack.startswith(a.stack_id)))
        n_bad = len(meta["corrupted_slices"])
        assert b.tp + b.fp + b.tn + b.fn == 32 * 32 * (8 - n_bad)
        assert a.tp + a.fp + a.tn + a.fn == 32 * 32 * 8


def test_empty_split_rejected(corpus):
    with pytest.raises(ValueError):
        evaluate_dataset(unet_init(UNetConfig(1, 2), 0), corpus, "train")


def test_comparison_table_format(corpus):
    ckpt = unet_init(UNetConfig(depth=1, base_features=2), 0)
    a = evaluate_dataset(ckpt, corpus, "normal_test")
    b = evaluate_dataset(ckpt, corpus, "normal_test", EvalOptions(postprocess=True))
    table = comparison_table([a, b], "normal_test")
    assert [row["method"] for row in table] == ["U-Net", "U-Net-PP"]
    text = format_table(table)
    assert text.splitlines()[0].split() == ["Method", "Dice", "Sensitivity", "Specificity", "Time"]
    assert "%" in text
