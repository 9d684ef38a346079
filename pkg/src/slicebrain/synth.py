"""Synthetic fetal-MRI phantoms: an ellipsoidal brain inside static maternal shells.

Noise is additive Gaussian, not Rician; these volumes exercise the pipeline and
make no claim to MR physics.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    ManifestEntry,
    MaskStack,
    Stack,
    ensure_dir,
    save_mask,
    save_stack,
)

CORRUPTIONS = ("none", "inter_slice_shift", "dark_slice", "heavy_noise")
CHALLENGING_REGIMES = ("inter_slice_shift", "dark_slice", "heavy_noise")


class PhantomConfigError(ValueError):
    pass


@dataclass
class Corruption:
    kind: str = "none"
    max_shift: int = 0
    probability: float = 0.0
    sigma_multiplier: float = 1.0
    dark_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise PhantomConfigError(f"unknown corruption {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise PhantomConfigError(f"probability {self.probability} outside [0, 1]")
        if self.max_shift < 0 or self.sigma_multiplier < 0 or self.dark_factor < 0:
            raise PhantomConfigError("corruption magnitudes must be non-negative")


@dataclass
class Shell:
    """A maternal-tissue ellipsoid, ``scale`` times the brain semi-axes in-plane."""

    scale: float
    intensity: float


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (128, 128, 24)
    brain_center: tuple[float, float, float] = (64.0, 64.0, 11.5)
    brain_axes: tuple[float, float, float] = (28.0, 22.0, 8.0)
    brain_intensity: float = 800.0
    shells: list[Shell] = field(
        default_factory=lambda: [Shell(1.35, 450.0), Shell(1.8, 260.0), Shell(2.4, 130.0)]
    )
    background: float = 20.0
    # dark skull layer around the brain, moves with it
    skull_thickness: float = 2.5
    skull_intensity: float = 90.0
    noise_sigma: float = 0.05
    corruption: Corruption = field(default_factory=Corruption)
    # abnormal-shape approximation: radial in-plane sinusoid on the brain boundary
    boundary_amplitude: float = 0.0
    boundary_frequency: int = 5
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.brain_center = tuple(float(c) for c in self.brain_center)
        self.brain_axes = tuple(float(a) for a in self.brain_axes)
        self.shells = [s if isinstance(s, Shell) else Shell(**s) for s in self.shells]
        if isinstance(self.corruption, dict):
            self.corruption = Corruption(**self.corruption)
        self.validate()

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise PhantomConfigError(f"bad shape {self.shape}")
        if self.noise_sigma < 0:
            raise PhantomConfigError("noise_sigma must be >= 0")
        if not 1 <= len(self.shells) <= 3:
            raise PhantomConfigError("need 1 to 3 maternal shells")
        if min(self.brain_axes) <= 0:
            raise PhantomConfigError("brain semi-axes must be positive")
        reach = 1.0 + abs(self.boundary_amplitude)
        shift = self.corruption.max_shift if self.corruption.kind == "inter_slice_shift" else 0
        for axis, (c, a, n) in enumerate(zip(self.brain_center, self.brain_axes, self.shape)):
            extent = a * reach + (shift if axis < 2 else 0)
            if c - extent < -0.5 or c + extent > n - 0.5:
                raise PhantomConfigError(
                    f"brain ellipsoid (center {self.brain_center}, axes {self.brain_axes}) "
                    f"does not fit in grid {self.shape}"
                )

    def to_json(self) -> dict:
        return asdict(self)


def _ellipse_radius(rows, cols, center, axes, amplitude=0.0, frequency=0):
    """Normalised in-plane radius; values <= 1 lie inside the (perturbed) ellipse."""
    dy = (rows - center[0]) / axes[0]
    dx = (cols - center[1]) / axes[1]
    r = np.sqrt(dy**2 + dx**2)
    if amplitude:
        theta = np.arctan2(dy, dx)
        r = r / (1.0 + amplitude * np.sin(frequency * theta))
    return r


def _ellipsoid_slice(rows, cols, k, center, axes, cfg: PhantomConfig) -> np.ndarray:
    """Boolean in-plane cross-section at slice k of an ellipsoid with the brain's shape."""
    dz = (k - center[2]) / axes[2]
    if abs(dz) > 1.0:
        return np.zeros(rows.shape, dtype=bool)
    r = _ellipse_radius(rows, cols, center, axes, cfg.boundary_amplitude, cfg.boundary_frequency)
    return r**2 + dz**2 <= 1.0


def make_phantom(config: PhantomConfig) -> tuple[Stack, MaskStack, dict]:
    """Render one phantom; returns (stack, ground-truth mask, metadata log).

    The mask is the geometric brain indicator after any inter-slice shift and
    before intensity corruption.  Dark slices keep their geometric mask and are
    listed under ``corrupted_slices`` in the metadata.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w, d = config.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    corr = config.corruption

    shifts = np.zeros((d, 2), dtype=np.int64)
    if corr.kind == "inter_slice_shift" and corr.max_shift > 0:
        shifts = rng.integers(-corr.max_shift, corr.max_shift + 1, size=(d, 2))
    dark = np.zeros(d, dtype=bool)
    if corr.kind == "dark_slice":
        dark = rng.random(d) < corr.probability
    sigma = config.noise_sigma * config.brain_intensity
    if corr.kind == "heavy_noise":
        sigma *= corr.sigma_multiplier

    # maternal tissue is static; only the fetal head moves between slices
    base = np.full((h, w), config.background, dtype=np.float64)
    radial = _ellipse_radius(rows, cols, config.brain_center, config.brain_axes)
    for shell in sorted(config.shells, key=lambda s: -s.scale):
        base[radial <= shell.scale] = shell.intensity

    voxels = np.empty((h, w, d), dtype=np.float64)
    labels = np.zeros((h, w, d), dtype=np.uint8)
    for k in range(d):
        center = (
            config.brain_center[0] + shifts[k, 0],
            config.brain_center[1] + shifts[k, 1],
        )
        center3 = (center[0], center[1], config.brain_center[2])
        inside = _ellipsoid_slice(rows, cols, k, center3, config.brain_axes, config)
        img = base.copy()
        if config.skull_thickness > 0:
            t = config.skull_thickness
            a, b, c = config.brain_axes
            img[_ellipsoid_slice(rows, cols, k, center3, (a + t, b + t, c + 1.0), config)] = config.skull_intensity
        img[inside] = config.brain_intensity
        if dark[k]:
            img *= corr.dark_factor
        voxels[:, :, k] = img
        labels[:, :, k] = inside
    if sigma > 0:
        voxels += rng.normal(0.0, sigma, size=voxels.shape)

    meta = {
        "corruption": asdict(corr),
        "shift_vectors": shifts.tolist(),
        "corrupted_slices": np.flatnonzero(dark).tolist(),
        "noise_sigma_abs": sigma,
        "seed": config.seed,
        "config": config.to_json(),
    }
    stack = Stack(voxels=voxels.astype(np.float32), spacing=config.spacing)
    return stack, MaskStack(labels=labels), meta


def ellipsoid_volume(config: PhantomConfig) -> float:
    a, b, c = config.brain_axes
    return 4.0 / 3.0 * math.pi * a * b * c


def random_phantom_config(
    rng: np.random.Generator,
    shape=(128, 128, 24),
    regime: str = "none",
    seed: int = 0,
) -> PhantomConfig:
    """Randomised geometry and contrast around the defaults, optionally corrupted."""
    h, w, d = shape
    axes = (
        rng.uniform(0.16, 0.24) * h,
        rng.uniform(0.14, 0.21) * w,
        rng.uniform(0.28, 0.38) * d,
    )
    center = (
        h / 2 - 0.5 + rng.uniform(-0.08, 0.08) * h,
        w / 2 - 0.5 + rng.uniform(-0.08, 0.08) * w,
        d / 2 - 0.5 + rng.uniform(-0.05, 0.05) * d,
    )
    brain = rng.uniform(700.0, 900.0)
    shells = [
        Shell(rng.uniform(1.25, 1.45), brain * rng.uniform(0.5, 0.6)),
        Shell(rng.uniform(1.7, 1.9), brain * rng.uniform(0.3, 0.38)),
        Shell(rng.uniform(2.2, 2.6), brain * rng.uniform(0.14, 0.2)),
    ]
    corruption = Corruption()
    if regime == "inter_slice_shift":
        corruption = Corruption(kind=regime, max_shift=int(rng.integers(6, 11)))
    elif regime == "dark_slice":
        corruption = Corruption(kind=regime, probability=rng.uniform(0.3, 0.5), dark_factor=0.1)
    elif regime == "heavy_noise":
        corruption = Corruption(kind=regime, sigma_multiplier=rng.uniform(4.0, 6.0))
    elif regime != "none":
        raise PhantomConfigError(f"unknown regime {regime!r}")
    if regime == "inter_slice_shift":
        # keep the shifted brain inside the grid
        shrink = 1.0 - corruption.max_shift / (0.5 * min(h, w))
        axes = (axes[0] * shrink, axes[1] * shrink, axes[2])
        center = (h / 2 - 0.5, w / 2 - 0.5, center[2])
    return PhantomConfig(
        shape=shape,
        brain_center=center,
        brain_axes=axes,
        brain_intensity=brain,
        shells=shells,
        background=rng.uniform(10.0, 30.0),
        skull_thickness=rng.uniform(2.0, 3.0) * h / 64,
        skull_intensity=brain * rng.uniform(0.08, 0.14),
        noise_sigma=rng.uniform(0.03, 0.06),
        corruption=corruption,
        spacing=(
            round(rng.uniform(1.0, 1.25), 4),
            round(rng.uniform(1.0, 1.25), 4),
            round(rng.uniform(2.0, 4.0), 4),
        ),
        seed=seed,
    )


def _child_seed(seed: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream, index])


def _challenging_regimes(n: int, rng: np.random.Generator) -> list[str]:
    # balanced assignment: every regime appears once per group of three
    regimes = list(CHALLENGING_REGIMES) * math.ceil(n / 3)
    regimes = regimes[:n]
    rng.shuffle(regimes)
    return regimes


def make_dataset(
    n_train: int,
    n_normal: int,
    n_challenging: int,
    out_dir,
    seed: int,
    shape=(128, 128, 24),
    fmt: str = "nii",
) -> DatasetManifest:
    """Write a train / normal / challenging phantom corpus and its ``manifest.json``."""
    for n in (n_train, n_normal, n_challenging):
        if n < 0:
            raise ValueError("phantom counts must be >= 0")
    if fmt not in ("nii", "raw"):
        raise ValueError(f"unknown volume format {fmt!r}")
    out_dir = ensure_dir(out_dir)
    ext = ".nii" if fmt == "nii" else ".json"
    regime_rng = np.random.default_rng(_child_seed(seed, 0, stream=1))
    plan = (
        [("train", "none")] * n_train
        + [("normal_test", "none")] * n_normal
        + [("challenging_test", r) for r in _challenging_regimes(n_challenging, regime_rng)]
    )
    manifest = DatasetManifest(seed=seed, root=out_dir)
    for index, (split, regime) in enumerate(plan):
        child = _child_seed(seed, index)
        geom_rng, noise_seed = np.random.default_rng(child), int(child.generate_state(1)[0])
        config = random_phantom_config(geom_rng, shape=shape, regime=regime, seed=noise_seed)
        stack, mask, meta = make_phantom(config)
        stack_id = f"{split}_{index:04d}"
        meta.update({"stack_id": stack_id, "subject_id": f"phantom{index:04d}", "split": split})
        save_stack(stack, out_dir / f"{stack_id}{ext}")
        save_mask(mask, out_dir / f"{stack_id}_mask{ext}", spacing=stack.spacing)
        with open(out_dir / f"{stack_id}_meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        manifest.entries.append(
            ManifestEntry(
                stack=f"{stack_id}{ext}",
                mask=f"{stack_id}_mask{ext}",
                split=split,
                meta=f"{stack_id}_meta.json",
            )
        )
    manifest.save(out_dir / "manifest.json")
    return manifest
