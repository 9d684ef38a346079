"""Confusion counts, overlap metrics, per-stack evaluation and report files."""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import DatasetManifest, MaskStack, ensure_dir
from .inference import segment_stack
from .models import Checkpoint
from .postproc import PostprocConfig

METRICS = ("dice", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def degenerate(self) -> bool:
        """Neither mask has any foreground."""
        return self.tp == 0 and self.fp == 0 and self.fn == 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, MaskStack) else np.asarray(mask)


def confusion(pred, truth) -> ConfusionCounts:
    p = _labels(pred).astype(bool)
    r = _labels(truth).astype(bool)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {r.shape}")
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty (see ``c.degenerate``)."""
    if c.degenerate:
        return 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def sensitivity(c: ConfusionCounts) -> Optional[float]:
    """TP / (TP + FN), or None when the reference has no foreground."""
    if c.tp + c.fn == 0:
        return None
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> Optional[float]:
    if c.tn + c.fp == 0:
        return None
    return c.tn / (c.tn + c.fp)


def metrics(c: ConfusionCounts) -> dict:
    return {"dice": dice(c), "sensitivity": sensitivity(c), "specificity": specificity(c)}


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class TimingSummary:
    n: int
    mean: float
    p50: float
    p95: float
    total: float


def nearest_rank(sorted_values, q: float):
    """Nearest-rank order statistic: element ``ceil(q * n) - 1`` of the sorted values."""
    n = len(sorted_values)
    return sorted_values[max(0, math.ceil(q * n) - 1)]


def timing_stats(latencies: Iterable[float]) -> TimingSummary:
    values = sorted(float(v) for v in latencies)
    if not values:
        raise ValueError("timing_stats needs at least one latency")
    total = math.fsum(values)
    return TimingSummary(
        n=len(values),
        mean=total / len(values),
        p50=nearest_rank(values, 0.50),
        p95=nearest_rank(values, 0.95),
        total=total,
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class StackRow:
    stack_id: str
    split: str
    tp: int
    fp: int
    tn: int
    fn: int
    dice: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    degenerate: bool
    seconds_per_stack: float
    seconds_per_slice: float


@dataclass
class SliceRow:
    stack_id: str
    slice_index: int
    corrupted: bool
    dice: float
    sensitivity: Optional[float]
    specificity: Optional[float]


def _mean_std(values: list) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return mean, std


@dataclass
class EvalReport:
    method: str
    rows: list[StackRow] = field(default_factory=list)
    slice_rows: list[SliceRow] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def splits(self) -> list[str]:
        return sorted({r.split for r in self.rows})

    def aggregates(self) -> dict:
        """Per split: mean and sample stdev over stacks of each metric and of timing."""
        out = {}
        for split in self.splits():
            rows = [r for r in self.rows if r.split == split]
            agg = {"n_stacks": len(rows)}
            for m in METRICS:
                mean, std = _mean_std([getattr(r, m) for r in rows])
                agg[m] = {"mean": mean, "std": std}
            out[split] = agg
        return out

    def timing_aggregates(self) -> dict:
        out = {}
        for split in self.splits():
            rows = [r for r in self.rows if r.split == split]
            mean_stack, std_stack = _mean_std([r.seconds_per_stack for r in rows])
            mean_slice, _ = _mean_std([r.seconds_per_slice for r in rows])
            out[split] = {
                "seconds_per_stack": {"mean": mean_stack, "std": std_stack},
                "seconds_per_slice": {"mean": mean_slice},
            }
        return out

    def mean(self, metric: str, split: str) -> float:
        return self.aggregates()[split][metric]["mean"]

    def boxplot_rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for r in self.rows:
            for m in METRICS:
                v = getattr(r, m)
                if v is not None:
                    rows.append((r.split, m, v))
        return rows

    def write(self, out_dir) -> dict[str, Path]:
        """report.csv / report.json / boxplot.csv hold only reproducible values;
        wall-clock figures go to timing.csv / timing.json."""
        out_dir = ensure_dir(out_dir)
        paths = {name: out_dir / name for name in ("report.csv", "report.json", "boxplot.csv", "slices.csv", "timing.csv", "timing.json")}
        metric_cols = ["stack_id", "split", "tp", "fp", "tn", "fn", "dice", "sensitivity", "specificity", "degenerate"]
        with open(paths["report.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(metric_cols)
            for r in self.rows:
                d = asdict(r)
                w.writerow([_fmt(d[c]) for c in metric_cols])
        with open(paths["boxplot.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "metric", "value"])
            for row in self.boxplot_rows():
                w.writerow([row[0], row[1], _fmt(row[2])])
        with open(paths["slices.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["stack_id", "slice_index", "corrupted", "dice", "sensitivity", "specificity"]
            w.writerow(cols)
            for r in self.slice_rows:
                d = asdict(r)
                w.writerow([_fmt(d[c]) for c in cols])
        with open(paths["timing.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stack_id", "split", "seconds_per_stack", "seconds_per_slice"])
            for r in self.rows:
                w.writerow([r.stack_id, r.split, _fmt(r.seconds_per_stack), _fmt(r.seconds_per_slice)])
        summary = {
            "method": self.method,
            "std_over": "stacks (sample standard deviation)",
            "aggregates": self.aggregates(),
            "options": self.options,
        }
        with open(paths["report.json"], "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        with open(paths["timing.json"], "w") as fh:
            json.dump({"method": self.method, "timing": self.timing_aggregates()}, fh, indent=2, sort_keys=True)
        return paths


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_report_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalOptions:
    postprocess: Optional[bool] = None  # None: on for voxelwise, off for U-Net
    postproc_config: PostprocConfig = field(default_factory=PostprocConfig)
    exclude_corrupted: bool = False
    method: Optional[str] = None

    def resolved_postprocess(self, kind: str) -> bool:
        return (kind == "voxelwise") if self.postprocess is None else bool(self.postprocess)


def default_method_label(kind: str, postprocess: bool) -> str:
    name = "U-Net" if kind == "unet" else "Voxelwise"
    return f"{name}-PP" if postprocess else name


def evaluate_dataset(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    split,
    options: EvalOptions | None = None,
    out_dir=None,
) -> EvalReport:
    """Segment every stack of ``split`` (a tag or list of tags) and score it in 3D."""
    options = options or EvalOptions()
    splits = [split] if isinstance(split, str) else list(split)
    entries = [e for s in splits for e in manifest.split(s)]
    if not entries:
        raise ValueError(f"no stacks in split(s) {splits}")
    use_pp = options.resolved_postprocess(ckpt.kind)
    report = EvalReport(
        method=options.method or default_method_label(ckpt.kind, use_pp),
        options={
            "postprocess": use_pp,
            "postproc_config": asdict(options.postproc_config),
            "exclude_corrupted": options.exclude_corrupted,
            "splits": splits,
        },
    )
    for entry in entries:
        stack, truth = manifest.load_pair(entry)
        meta = manifest.load_meta(entry)
        corrupted = set(meta.get("corrupted_slices", []))
        seg = segment_stack(ckpt, stack, options.postproc_config if use_pp else None, options.postproc_config.threshold)
        keep = [k for k in range(stack.n_slices) if not (options.exclude_corrupted and k in corrupted)]
        pred_l, truth_l = seg.mask.labels[:, :, keep], truth.labels[:, :, keep]
        c = confusion(pred_l, truth_l)
        m = metrics(c)
        report.rows.append(
            StackRow(
                stack_id=stack.stack_id,
                split=entry.split,
                tp=c.tp, fp=c.fp, tn=c.tn, fn=c.fn,
                dice=m["dice"],
                sensitivity=m["sensitivity"],
                specificity=m["specificity"],
                degenerate=c.degenerate,
                seconds_per_stack=seg.total_seconds,
                seconds_per_slice=seg.total_seconds / stack.n_slices,
            )
        )
        for k in range(stack.n_slices):
            sm = metrics(confusion(seg.mask.labels[:, :, k], truth.labels[:, :, k]))
            report.slice_rows.append(SliceRow(stack.stack_id, k, k in corrupted, sm["dice"], sm["sensitivity"], sm["specificity"]))
    if out_dir is not None:
        report.write(out_dir)
    return report


def comparison_table(reports: list[EvalReport], split: str) -> list[dict]:
    """Method | Dice | Sensitivity | Specificity | Time rows for one split."""
    table = []
    for rep in reports:
        agg = rep.aggregates()[split]
        timing = rep.timing_aggregates()[split]
        table.append(
            {
                "method": rep.method,
                "dice": agg["dice"]["mean"],
                "sensitivity": agg["sensitivity"]["mean"],
                "specificity": agg["specificity"]["mean"],
                "seconds_per_stack": timing["seconds_per_stack"]["mean"],
            }
        )
    return table


def format_table(table: list[dict]) -> str:
    def pct(v):
        return "n/a" if v is None else f"{100 * v:.2f}%"

    lines = [f"{'Method':<16}{'Dice':>10}{'Sensitivity':>14}{'Specificity':>14}{'Time':>10}"]
    for row in table:
        lines.append(
            f"{row['method']:<16}{pct(row['dice']):>10}{pct(row['sensitivity']):>14}"
            f"{pct(row['specificity']):>14}{row['seconds_per_stack']:>9.2f}s"
        )
    return "\n".join(lines)
