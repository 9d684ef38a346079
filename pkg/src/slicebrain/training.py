"""Class weighting, weighted softmax cross-entropy, learning-rate schedule and training loops."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    DatasetManifest,
    ManifestEntry,
    MaskStack,
    ensure_dir,
    extract_patches,
    normalize_stack,
    pad_to_shape,
    sample_centers,
)
from .evaluation import confusion, dice
from .inference import segment_stack
from .models import (
    Checkpoint,
    UNetConfig,
    VoxelwiseConfig,
    save_checkpoint,
    unet_init,
    unet_logits,
    voxelwise_init,
    voxelwise_patch_logits,
)

log = logging.getLogger(__name__)

CLASS_NAMES = ("non_brain", "brain")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


# ---------------------------------------------------------------------------
# class weights and loss


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, ...]

    def __post_init__(self):
        if any(not v > 0 for v in self.w):
            raise ValueError(f"class weights must be positive, got {self.w}")

    @classmethod
    def equal(cls, n_classes: int = 2) -> "ClassWeights":
        return cls(tuple(1.0 for _ in range(n_classes)))


def class_weights_from_fractions(p: Sequence[float]) -> ClassWeights:
    inv = [1.0 / pc for pc in p]
    total = sum(inv)
    return ClassWeights(tuple(v / total * len(p) for v in inv))


def compute_class_weights(masks, n_classes: int = 2) -> ClassWeights:
    """Inverse-frequency weights over the whole corpus, normalised to sum to n_classes."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for m in masks:
        labels = m.labels if isinstance(m, MaskStack) else np.asarray(m)
        counts += np.bincount(labels.ravel().astype(np.int64), minlength=n_classes)[:n_classes]
    for c, name in enumerate(CLASS_NAMES[:n_classes]):
        if counts[c] == 0:
            raise ValueError(f"class {name} absent from the corpus; its weight is undefined")
    p = counts / counts.sum()
    return class_weights_from_fractions(p)


def _weight_vector(weights, n_classes, like: torch.Tensor) -> torch.Tensor:
    w = weights.w if isinstance(weights, ClassWeights) else tuple(weights)
    if len(w) != n_classes:
        raise ValueError(f"{len(w)} weights for {n_classes} classes")
    return torch.tensor(w, dtype=like.dtype)


def weighted_softmax_ce(logits, target, weights) -> torch.Tensor:
    """Weighted mean of per-pixel softmax cross-entropy.

    ``logits`` is ``(..., n_classes)`` with ``target`` of shape ``(...)``; each
    pixel is weighted by the weight of its target class and the sum is divided
    by the total applied weight.
    """
    z = logits if torch.is_tensor(logits) else torch.as_tensor(np.asarray(logits, dtype=np.float64))
    t = target if torch.is_tensor(target) else torch.as_tensor(np.asarray(target))
    if tuple(z.shape[:-1]) != tuple(t.shape):
        raise ValueError(f"logits {tuple(z.shape)} and target {tuple(t.shape)} are not congruent")
    t = t.long()
    w = _weight_vector(weights, z.shape[-1], z)[t]
    nll = torch.logsumexp(z, dim=-1) - torch.gather(z, -1, t[..., None])[..., 0]
    return (w * nll).sum() / w.sum()


def weighted_softmax_ce_grad(logits: np.ndarray, target: np.ndarray, weights) -> np.ndarray:
    """Closed-form d(loss)/d(logits): w_t * (softmax - onehot) / sum(w_t)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target).astype(np.int64)
    w_all = np.asarray(weights.w if isinstance(weights, ClassWeights) else weights, dtype=np.float64)
    w = w_all[t]
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    soft = e / e.sum(axis=-1, keepdims=True)
    onehot = np.eye(z.shape[-1])[t]
    return w[..., None] * (soft - onehot) / w.sum()


# ---------------------------------------------------------------------------
# configuration and schedule


@dataclass
class TrainConfig:
    network: str = "unet"
    initial_lr: float = 1e-4
    lr_decay: float = 0.9
    decay_steps: int = 2000
    epochs: int = 100
    batch_size: int = 8
    patience: int = 0  # 0 disables early stopping
    validation_fraction: float = 0.1
    samples_per_stack: int = 30000
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.network not in ("unet", "voxelwise"):
            raise ValueError(f"unknown network {self.network!r}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.patience > 0 and not 0 < self.validation_fraction < 1:
            raise ValueError("early stopping needs 0 < validation_fraction < 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")

    @classmethod
    def defaults(cls, network: str, **overrides) -> "TrainConfig":
        if network == "unet":
            base = dict(network="unet", initial_lr=1e-4, lr_decay=0.9, decay_steps=2000, epochs=100, batch_size=8, patience=0)
        elif network == "voxelwise":
            base = dict(network="voxelwise", initial_lr=5e-5, lr_decay=1.0, decay_steps=0, epochs=3, batch_size=256, patience=2)
        else:
            raise ValueError(f"unknown network {network!r}")
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    @classmethod
    def from_json(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> dict:
        return asdict(self)

    def schedule_text(self) -> str:
        if self.lr_decay == 1.0 or self.decay_steps <= 0:
            return f"{_sci(self.initial_lr)} (constant)"
        return f"{_sci(self.initial_lr)} × {self.lr_decay:g}^⌊step/{self.decay_steps}⌋"

    def model_config(self):
        if self.network == "unet":
            return UNetConfig(**self.model)
        return VoxelwiseConfig(**self.model)


def _sci(x: float) -> str:
    mantissa, exponent = f"{x:e}".split("e")
    mantissa = mantissa.rstrip("0").rstrip(".")
    return f"{mantissa}e{int(exponent)}"


def lr_at(step: int, config: TrainConfig) -> float:
    """Staircase decay: initial_lr * lr_decay ** floor(step / decay_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.lr_decay == 1.0 or config.decay_steps <= 0:
        return config.initial_lr
    return config.initial_lr * config.lr_decay ** (step // config.decay_steps)


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    class_weights: Optional[tuple] = None
    validation_stacks: list[str] = field(default_factory=list)

    def record(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "epochs_run": len(self.epoch_loss),
            "epoch_loss": self.epoch_loss,
            "val_dice": self.val_dice,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "class_weights": list(self.class_weights) if self.class_weights else None,
            "validation_stacks": self.validation_stacks,
        }

    def write(self, out_dir) -> None:
        out_dir = ensure_dir(out_dir)
        with open(out_dir / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for row in zip(self.steps, self.losses, self.lrs):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        with open(out_dir / "history.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        with open(out_dir / "timing.json", "w") as fh:
            json.dump({"epoch_seconds": self.epoch_seconds, "total_seconds": sum(self.epoch_seconds)}, fh, indent=2)


class EarlyStopping:
    """Tracks the best validation score; signals a stop after ``patience`` epochs
    without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.patience > 0 and self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# shared plumbing


def split_validation(entries: list[ManifestEntry], fraction: float, rng: np.random.Generator):
    """Hold out whole stacks (never slices); needs at least two training stacks."""
    if fraction <= 0 or len(entries) < 2:
        return list(entries), []
    n_val = min(len(entries) - 1, max(1, round(fraction * len(entries))))
    order = rng.permutation(len(entries))
    val_idx = set(order[:n_val].tolist())
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    return train, val


def _load_split(manifest: DatasetManifest, entries):
    return [manifest.load_pair(e) for e in entries]


def _mean_stack_dice(ckpt: Checkpoint, pairs) -> float:
    scores = []
    for stack, truth in pairs:
        seg = segment_stack(ckpt, stack)
        scores.append(dice(confusion(seg.mask, truth)))
    return float(np.mean(scores))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _adam(params) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=1.0, betas=(0.9, 0.999), eps=1e-8)


def _snapshot(tensors: dict, config, step: int, seeds) -> Checkpoint:
    return Checkpoint(
        config=config,
        tensors={k: v.detach().clone() for k, v in tensors.items()},
        step=step,
        seeds=list(seeds),
    )


def _prepare(manifest: DatasetManifest, config: TrainConfig):
    entries = manifest.split("train")
    if not entries:
        raise ValueError("manifest has no training stacks")
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(config.seed)
    train_e, val_e = split_validation(entries, config.validation_fraction, rng)
    return rng, _load_split(manifest, train_e), _load_split(manifest, val_e)


# ---------------------------------------------------------------------------
# U-Net


def _slice_tensors(pairs, multiple: int):
    """Normalized slices and labels, zero-padded onto one canvas divisible by ``multiple``."""
    h = max(s.shape[0] for s, _ in pairs)
    w = max(s.shape[1] for s, _ in pairs)
    canvas = (-(-h // multiple) * multiple, -(-w // multiple) * multiple)
    xs, ys = [], []
    for stack, mask in pairs:
        norm = normalize_stack(stack)
        for k in range(stack.n_slices):
            xs.append(pad_to_shape(norm[:, :, k], canvas)[0])
            ys.append(pad_to_shape(mask.labels[:, :, k], canvas)[0])
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys).astype(np.int64))


def train_unet(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir=None,
) -> tuple[Checkpoint, TrainHistory]:
    """Full-slice U-Net training with corpus-level inverse-frequency class weights.

    Returns the final checkpoint; with ``out_dir`` also writes ``final.ckpt``,
    ``best.ckpt`` (highest validation Dice, or final without validation data)
    and the history files.
    """
    t_start = time.perf_counter()
    model_cfg = config.model_config()
    rng, train_pairs, val_pairs = _prepare(manifest, config)
    weights = compute_class_weights([m for _, m in train_pairs])
    x_all, y_all = _slice_tensors(train_pairs, model_cfg.multiple)
    n = x_all.shape[0]

    init = unet_init(model_cfg, config.seed)
    params = {k: v.clone().requires_grad_(True) for k, v in init.tensors.items()}
    opt = _adam(list(params.values()))
    history = TrainHistory(class_weights=weights.w, validation_stacks=[s.stack_id for s, _ in val_pairs])
    best, best_score, step = None, -math.inf, 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            lr = lr_at(step, config)
            _set_lr(opt, lr)
            logits = unet_logits(params, model_cfg, x_all[idx][:, None]).permute(0, 2, 3, 1)
            loss = weighted_softmax_ce(logits, y_all[idx], weights)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.record(step, value, lr)
            epoch_losses.append(value)
            step += 1
        history.epoch_loss.append(float(np.mean(epoch_losses)))
        current = _snapshot(params, model_cfg, step, init.seeds)
        if val_pairs:
            score = _mean_stack_dice(current, val_pairs)
            history.val_dice.append(score)
            if score > best_score:
                best, best_score, history.best_epoch = current, score, epoch + 1
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("unet epoch %d loss %.5f val dice %s", epoch + 1, history.epoch_loss[-1], history.val_dice[-1] if val_pairs else "-")

    final = _snapshot(params, model_cfg, step, init.seeds)
    if best is None:
        best, history.best_epoch = final, config.epochs
    if out_dir is not None:
        out_dir = ensure_dir(out_dir)
        save_checkpoint(final, out_dir / "final.ckpt")
        save_checkpoint(best, out_dir / "best.ckpt")
        history.write(out_dir)
    log.info("unet training took %.1f s", time.perf_counter() - t_start)
    return final, history


# ---------------------------------------------------------------------------
# voxelwise


def train_voxelwise(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir=None,
) -> tuple[Checkpoint, TrainHistory]:
    """Patch-triple training with class-balanced sampling and early stopping.

    ``samples_per_stack`` centres are drawn once per stack; patches are cut on the
    fly per batch.  The returned checkpoint is the best-validation one.
    """
    model_cfg = config.model_config()
    rng, train_pairs, val_pairs = _prepare(manifest, config)
    sizes = model_cfg.patch_sizes
    volumes = [normalize_stack(s) for s, _ in train_pairs]
    centers, labels, owners = [], [], []
    seeds = np.random.SeedSequence(config.seed).spawn(len(train_pairs))
    for i, (_, mask) in enumerate(train_pairs):
        c, l = sample_centers(mask, config.samples_per_stack, int(seeds[i].generate_state(1)[0]))
        centers.append(c)
        labels.append(l)
        owners.append(np.full(len(l), i))
    centers = np.concatenate(centers)
    labels = torch.from_numpy(np.concatenate(labels))
    owners = np.concatenate(owners)
    n = len(labels)

    init = voxelwise_init(model_cfg, config.seed)
    tensors = {k: v.clone() for k, v in init.tensors.items()}
    learnable = init.parameters()
    for k in learnable:
        tensors[k].requires_grad_(True)
    opt = _adam([tensors[k] for k in learnable])
    weights = ClassWeights.equal(model_cfg.n_classes)
    history = TrainHistory(class_weights=weights.w, validation_stacks=[s.stack_id for s, _ in val_pairs])
    stopper = EarlyStopping(config.patience)
    best, step = None, 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            patches = _gather(volumes, owners[idx], centers[idx], sizes)
            lr = lr_at(step, config)
            _set_lr(opt, lr)
            logits = voxelwise_patch_logits(tensors, model_cfg, patches, training=True)
            loss = weighted_softmax_ce(logits, labels[idx], weights)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.record(step, value, lr)
            epoch_losses.append(value)
            step += 1
        history.epoch_loss.append(float(np.mean(epoch_losses)))
        current = _snapshot(tensors, model_cfg, step, init.seeds)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if val_pairs:
            score = _mean_stack_dice(current, val_pairs)
            history.val_dice.append(score)
            stop = stopper.update(epoch + 1, score)
            if stopper.best_epoch == epoch + 1:
                best = current
            log.info("voxelwise epoch %d loss %.5f val dice %.4f", epoch + 1, history.epoch_loss[-1], score)
            if stop:
                history.stopped_early = True
                break
        else:
            best = current
    history.best_epoch = stopper.best_epoch if val_pairs else len(history.epoch_loss)
    final = _snapshot(tensors, model_cfg, step, init.seeds)
    if out_dir is not None:
        out_dir = ensure_dir(out_dir)
        save_checkpoint(final, out_dir / "final.ckpt")
        save_checkpoint(best, out_dir / "best.ckpt")
        history.write(out_dir)
    return best, history


def _gather(volumes, owners, centers, sizes) -> dict[int, torch.Tensor]:
    out = {s: np.empty((len(owners), s, s), dtype=np.float32) for s in sizes}
    for i in np.unique(owners):
        sel = np.flatnonzero(owners == i)
        got = extract_patches(volumes[i], centers[sel], sizes)
        for s in sizes:
            out[s][sel] = got[s]
    return {s: torch.from_numpy(v) for s, v in out.items()}


def train(manifest: DatasetManifest, config: TrainConfig, out_dir=None):
    if config.network == "unet":
        return train_unet(manifest, config, out_dir)
    return train_voxelwise(manifest, config, out_dir)
