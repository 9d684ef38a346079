"""``slicebrain`` command line: synth | train | predict | stream | evaluate.

Option precedence is flag > ``--config`` JSON > built-in default; the seed also
falls back to ``$SLICEBRAIN_SEED``.  Every command writes ``config_echo.json``
into its output directory, and ``slicebrain <cmd> --config config_echo.json``
re-runs it.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("slicebrain")

SEED_ENV = "SLICEBRAIN_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# option resolution


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("global")
    g.add_argument("--config", help="JSON file of option values")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("-v", "--verbose", action="store_true")


def _shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in str(text).replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use H,W,D")
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use H,W,D")
    return parts


DEFAULTS = {
    "synth": {"train": 0, "normal": 0, "challenging": 0, "shape": [128, 128, 24], "format": "nii"},
    "train": {"manifest": None, "network": None},
    "predict": {"checkpoint": None, "manifest": None, "split": "normal_test", "postprocess": None,
                "threshold": 0.5, "connectivity": 26, "closing_radius": 5},
    "stream": {"checkpoint": None, "input_stack": None, "watch_dir": None, "simulate_acquisition": None,
               "period": 1.0, "emit": None, "idle_timeout": 2.0, "threshold": 0.5},
    "evaluate": {"checkpoint": None, "compare": None, "labels": None, "manifest": None,
                 "split": ["normal_test", "challenging_test"], "postprocess": None, "threshold": 0.5,
                 "connectivity": 26, "closing_radius": 5, "exclude_corrupted": False, "plot": True},
}
_GLOBAL_KEYS = ("config", "seed", "out", "verbose", "command")


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one flat option dict."""
    opts = dict(DEFAULTS[args.command])
    file_opts = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        file_opts = raw.get("options", raw) if isinstance(raw, dict) else {}
        if "command" in raw and raw["command"] != args.command:
            raise UsageError(f"config file is for {raw['command']!r}, not {args.command!r}")
        opts.update({k: v for k, v in file_opts.items() if k not in ("seed", "out")})
    for key, value in vars(args).items():
        if key not in _GLOBAL_KEYS and value is not None:
            opts[key] = value
    if args.seed is not None:
        seed = args.seed
    elif "seed" in file_opts:
        seed = int(file_opts["seed"])
    elif os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer")
    else:
        seed = 0
    opts["seed"] = seed
    opts["out"] = args.out if args.out is not None else file_opts.get("out")
    return opts


def write_echo(out_dir: Path, command: str, opts: dict, extra: dict | None = None) -> Path:
    echo = {"command": command, "version": __version__, "options": _jsonable(opts)}
    if extra:
        echo.update(extra)
    path = Path(out_dir) / "config_echo.json"
    with open(path, "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "", [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _postproc_config(opts):
    from .postproc import PostprocConfig

    return PostprocConfig(threshold=opts["threshold"], connectivity=opts["connectivity"], closing_radius=opts["closing_radius"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(opts: dict) -> int:
    from .synth import make_dataset

    _require(opts, "out")
    manifest = make_dataset(
        int(opts["train"]), int(opts["normal"]), int(opts["challenging"]),
        opts["out"], seed=opts["seed"], shape=tuple(opts["shape"]), fmt=opts["format"],
    )
    write_echo(manifest.root, "synth", opts)
    print(manifest.root / "manifest.json")
    return 0


def cmd_train(opts: dict) -> int:
    from .data import DatasetManifest, ensure_dir
    from .plotting import loss_curve
    from .training import TrainConfig, TrainingDivergedError, train

    _require(opts, "network", "manifest", "out")
    model = {}
    for key in ("depth", "base_features"):
        if opts.get(key) is not None:
            if opts["network"] != "unet":
                raise UsageError(f"--{key.replace('_', '-')} only applies to --network unet")
            model[key] = opts[key]
    config = TrainConfig.defaults(
        opts["network"],
        initial_lr=opts.get("lr"),
        lr_decay=opts.get("lr_decay"),
        decay_steps=opts.get("decay_steps"),
        epochs=opts.get("epochs"),
        batch_size=opts.get("batch_size"),
        patience=opts.get("patience"),
        validation_fraction=opts.get("validation_fraction"),
        samples_per_stack=opts.get("samples_per_stack"),
        seed=opts["seed"],
        model=model,
    )
    out = ensure_dir(opts["out"])
    write_echo(out, "train", opts, {"train_config": config.to_json(), "lr_schedule": config.schedule_text()})
    manifest = DatasetManifest.load(opts["manifest"])
    try:
        _, history = train(manifest, config, out_dir=out)
    except TrainingDivergedError as exc:
        log.error("training diverged at step %d: loss %s", exc.step, exc.loss)
        return 1
    loss_curve(history, out / "loss_curve.png")
    print(out / "final.ckpt")
    return 0


def cmd_predict(opts: dict) -> int:
    from .data import DatasetManifest, ensure_dir, save_mask
    from .evaluation import EvalOptions
    from .inference import segment_stack
    from .models import load_checkpoint

    _require(opts, "checkpoint", "manifest", "out")
    ckpt = load_checkpoint(opts["checkpoint"])
    manifest = DatasetManifest.load(opts["manifest"])
    entries = manifest.split(opts["split"])
    if not entries:
        raise ValueError(f"split {opts['split']!r} is empty")
    use_pp = EvalOptions(postprocess=opts["postprocess"]).resolved_postprocess(ckpt.kind)
    pp = _postproc_config(opts) if use_pp else None
    out = ensure_dir(opts["out"])
    write_echo(out, "predict", opts, {"postprocess_applied": use_pp})
    masks_dir = ensure_dir(out / "masks")
    from .data import load_stack

    with open(out / "timing.csv", "w") as timing:
        timing.write("stack_id,slice_index,seconds\n")
        for entry in entries:
            stack = load_stack(manifest.resolve(entry.stack), split_tag=entry.split)
            seg = segment_stack(ckpt, stack, pp, opts["threshold"])
            save_mask(seg.mask, masks_dir / f"{stack.stack_id}_pred.nii", spacing=stack.spacing)
            for k, sec in enumerate(seg.slice_seconds):
                timing.write(f"{stack.stack_id},{k},{sec!r}\n")
            if pp is not None:
                timing.write(f"{stack.stack_id},postprocess,{seg.postprocess_seconds!r}\n")
            log.info("%s: %.3f s", stack.stack_id, seg.total_seconds)
    print(masks_dir)
    return 0


def cmd_stream(opts: dict) -> int:
    from .data import MaskStack, ensure_dir, save_mask
    from .models import load_checkpoint
    from .streaming import (
        directory_source,
        frame_source,
        run_stream,
        stack_source,
        stdin_binary,
        write_latency_log,
    )

    _require(opts, "checkpoint")
    if opts["input_stack"] and opts["watch_dir"]:
        raise UsageError("use either --input-stack or --watch-dir, not both")
    ckpt = load_checkpoint(opts["checkpoint"])
    period = float(opts["simulate_acquisition"] or opts["period"])
    out = ensure_dir(opts["out"]) if opts["out"] else None
    if out is not None:
        write_echo(out, "stream", opts)

    stdin = None
    if opts["input_stack"]:
        source = stack_source(opts["input_stack"], period=float(opts["simulate_acquisition"] or 0.0))
    elif opts["watch_dir"]:
        source = directory_source(opts["watch_dir"], idle_timeout=float(opts["idle_timeout"]))
    else:
        stdin = stdin_binary()
        source = frame_source(stdin)

    emit_fh, close_emit = None, False
    if opts["emit"] == "-":
        emit_fh = sys.stdout.buffer
    elif opts["emit"]:
        emit_fh, close_emit = open(opts["emit"], "wb"), True
    elif out is not None:
        emit_fh, close_emit = open(out / "masks.frames", "wb"), True
    try:
        result = run_stream(ckpt, source, emit=emit_fh, period=period, threshold=opts["threshold"])
    finally:
        if close_emit:
            emit_fh.close()
        if stdin is not None:
            stdin.close()

    summary = result.summary()
    if out is not None:
        write_latency_log(result, out / "latency.csv")
        with open(out / "stream_summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        if result.masks:
            order = sorted(result.masks)
            shapes = {result.masks[k].shape for k in order}
            if len(shapes) == 1:
                vol = np.stack([result.masks[k] for k in order], axis=2)
                save_mask(MaskStack(vol, source="predicted"), out / "stream_masks.nii")
    p95 = summary.get("latency_p95")
    print(f"frames: {summary['frames']}", file=sys.stderr)
    if p95 is not None:
        print(f"p95 latency: {p95:.4f} s (period {period:g} s)", file=sys.stderr)
    print(f"REALTIME: {'yes' if summary['realtime'] else 'no'}", file=sys.stderr)
    return 1 if result.errors else 0


def cmd_evaluate(opts: dict) -> int:
    from .data import DatasetManifest, ensure_dir
    from .evaluation import EvalOptions, comparison_table, evaluate_dataset, format_table
    from .models import load_checkpoint
    from .plotting import boxplot_figure

    _require(opts, "manifest", "out")
    if opts["checkpoint"] and opts["compare"]:
        raise UsageError("use either --checkpoint or --compare")
    paths = opts["compare"] or ([opts["checkpoint"]] if opts["checkpoint"] else [])
    if not paths:
        raise UsageError("missing required option: --checkpoint or --compare")
    labels = opts["labels"] or [None] * len(paths)
    if len(labels) != len(paths):
        raise UsageError("--labels needs one label per checkpoint")
    manifest = DatasetManifest.load(opts["manifest"])
    splits = [opts["split"]] if isinstance(opts["split"], str) else list(opts["split"])
    out = ensure_dir(opts["out"])
    write_echo(out, "evaluate", opts)

    reports = []
    for path, label in zip(paths, labels):
        ckpt = load_checkpoint(path)
        options = EvalOptions(
            postprocess=opts["postprocess"],
            postproc_config=_postproc_config(opts),
            exclude_corrupted=bool(opts["exclude_corrupted"]),
            method=label,
        )
        target = out if len(paths) == 1 else out / _slug(label or Path(path).stem, len(reports))
        reports.append(evaluate_dataset(ckpt, manifest, splits, options, out_dir=target))

    for split in splits:
        table = comparison_table(reports, split)
        with open(out / f"table_{split}.csv", "w") as fh:
            fh.write("method,dice,sensitivity,specificity\n")
            for row in table:
                fh.write(f"{row['method']},{row['dice']!r},{row['sensitivity']!r},{row['specificity']!r}\n")
        text = format_table(table)
        (out / f"table_{split}.txt").write_text(text + "\n")
        print(f"[{split}]\n{text}")
    if opts["plot"]:
        boxplot_figure(reports, out / "boxplot.png")
    return 0


def _slug(text: str, index: int) -> str:
    keep = "".join(c if c.isalnum() or c in "-_" else "_" for c in text)
    return f"{index:02d}_{keep}"


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicebrain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom corpus")
    _common(p)
    p.add_argument("--train", type=int)
    p.add_argument("--normal", type=int)
    p.add_argument("--challenging", type=int)
    p.add_argument("--shape", type=_shape, help="H,W,D (default 128,128,24)")
    p.add_argument("--format", choices=["nii", "raw"])

    p = sub.add_parser("train", help="train a U-Net or voxelwise network")
    _common(p)
    p.add_argument("--network", choices=["unet", "voxelwise"])
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--decay-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--samples-per-stack", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-features", type=int)

    def pp_flags(p):
        p.add_argument("--postprocess", dest="postprocess", action="store_const", const=True)
        p.add_argument("--no-postprocess", dest="postprocess", action="store_const", const=False)
        p.add_argument("--threshold", type=float)
        p.add_argument("--connectivity", type=int, choices=[6, 18, 26])
        p.add_argument("--closing-radius", type=int)

    p = sub.add_parser("predict", help="segment every stack of a manifest split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "normal_test", "challenging_test"])
    pp_flags(p)

    p = sub.add_parser("stream", help="segment slices as they arrive")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input-stack", help="replay a stored stack slice by slice")
    p.add_argument("--watch-dir", help="consume frame files as they appear")
    p.add_argument("--simulate-acquisition", type=float, metavar="SECONDS", help="release one slice every SECONDS")
    p.add_argument("--period", type=float, help="acquisition period the p95 latency must beat")
    p.add_argument("--emit", help="mask frame output path, '-' for stdout")
    p.add_argument("--idle-timeout", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("evaluate", help="score checkpoints against ground truth")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--compare", nargs="+", metavar="CKPT")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--split", nargs="+", choices=["train", "normal_test", "challenging_test"])
    p.add_argument("--exclude-corrupted", action="store_const", const=True)
    p.add_argument("--no-plot", dest="plot", action="store_const", const=False)
    pp_flags(p)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "stream": cmd_stream,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"slicebrain {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"slicebrain {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
