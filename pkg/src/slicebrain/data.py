"""Stack and mask data model, volume I/O, slice normalization and patch sampling.

Two on-disk volume formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), spacing taken from ``pixdim``.
* A raw grid: ``<name>.json`` header ``{"shape": [h, w, d], "spacing": [x, y, z],
  "dtype": "f32-le"}`` next to a ``<name>.raw`` blob in C order.  Masks use
  ``"dtype": "u8"``.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPLITS = ("train", "normal_test", "challenging_test")
PATCH_SIZES = (51, 25, 15)

_RAW_DTYPES = {"f32-le": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be turned into a valid Stack or MaskStack."""


class EmptyMaskWarning(UserWarning):
    """A mask has no voxels of one class, so sampling could not be balanced."""


@dataclass
class Stack:
    """A stack of 2D slices, stored as ``voxels[row, col, slice]``."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    stack_id: str = ""
    subject_id: str = ""
    split_tag: str = "train"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise VolumeFormatError(f"expected 3D volume, got shape {self.voxels.shape}")
        if min(self.voxels.shape) < 1:
            raise VolumeFormatError(f"empty dimension in shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise VolumeFormatError(f"non-finite intensities in stack {self.stack_id!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeFormatError(f"non-positive spacing {self.spacing}")
        if self.split_tag not in SPLITS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]

    def slice(self, k: int) -> np.ndarray:
        return self.voxels[:, :, k]


@dataclass
class MaskStack:
    labels: np.ndarray
    source: str = "ground_truth"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeFormatError(f"expected 3D mask, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if not np.all((labels == 0) | (labels == 1)):
                raise VolumeFormatError("mask values must be 0 or 1")
            labels = labels.astype(np.uint8)
        elif labels.size and labels.max() > 1:
            raise VolumeFormatError("mask values must be 0 or 1")
        self.labels = labels
        if self.source not in ("ground_truth", "predicted"):
            raise ValueError(f"unknown mask source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def check_congruent(self, stack: Stack) -> None:
        if self.shape != stack.shape:
            raise ValueError(f"mask shape {self.shape} does not match stack shape {stack.shape}")


@dataclass
class PatchSample:
    """Concentric patches keyed by size, all centred on ``center`` = (row, col, slice)."""

    patches: dict[int, np.ndarray]
    center: tuple[int, int, int]
    label: int


@dataclass
class ManifestEntry:
    stack: str
    mask: str
    split: str
    meta: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    root: Path = field(default_factory=Path)

    def split(self, tag: str) -> list[ManifestEntry]:
        if tag not in SPLITS:
            raise ValueError(f"unknown split tag {tag!r}")
        return [e for e in self.entries if e.split == tag]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_pair(self, entry: ManifestEntry) -> tuple[Stack, MaskStack]:
        stack = load_stack(self.resolve(entry.stack), split_tag=entry.split)
        mask = load_mask(self.resolve(entry.mask))
        mask.check_congruent(stack)
        return stack, mask

    def load_meta(self, entry: ManifestEntry) -> dict:
        if entry.meta is None:
            return {}
        with open(self.resolve(entry.meta)) as fh:
            return json.load(fh)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "entries": [
                {"stack": e.stack, "mask": e.mask, "split": e.split, "meta": e.meta}
                for e in self.entries
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path, validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            raw = json.load(fh)
        entries = [ManifestEntry(**e) for e in raw.get("entries", [])]
        manifest = cls(entries=entries, seed=int(raw.get("seed", 0)), root=path.parent)
        if validate:
            manifest.validate()
        return manifest

    def validate(self) -> None:
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split tag {e.split!r} in manifest")
            for rel in (e.stack, e.mask):
                if not _volume_exists(self.resolve(rel)):
                    raise FileNotFoundError(f"manifest references missing file {rel}")
            if read_shape(self.resolve(e.stack)) != read_shape(self.resolve(e.mask)):
                raise ValueError(f"stack/mask shape mismatch for {e.stack}")


def mask_path_for(stack_path) -> str:
    """Filename convention pairing ``<stack>.nii`` with ``<stack>_mask.nii``."""
    stack_path = str(stack_path)
    for ext in (".nii.gz", ".nii", ".json"):
        if stack_path.endswith(ext):
            return stack_path[: -len(ext)] + "_mask" + ext
    raise VolumeFormatError(f"unrecognised volume extension: {stack_path}")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _volume_exists(path: Path) -> bool:
    if _is_nifti(path):
        return path.exists()
    return path.exists() and path.with_suffix(".raw").exists()


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii", ".json"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _read_raw(path: Path) -> tuple[np.ndarray, tuple]:
    with open(path) as fh:
        header = json.load(fh)
    shape = tuple(int(s) for s in header["shape"])
    dtype = _RAW_DTYPES.get(header.get("dtype", "f32-le"))
    if dtype is None:
        raise VolumeFormatError(f"unsupported raw dtype {header.get('dtype')!r}")
    blob = path.with_suffix(".raw")
    if not blob.exists():
        raise FileNotFoundError(f"raw blob missing for header {path}")
    data = np.fromfile(blob, dtype=dtype)
    if data.size != math.prod(shape):
        raise VolumeFormatError(f"{blob} holds {data.size} values, header says {shape}")
    return data.reshape(shape), tuple(header.get("spacing", (1.0, 1.0, 1.0)))


def _write_raw(path: Path, array: np.ndarray, spacing, dtype_tag: str) -> None:
    header = {
        "shape": list(array.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_tag,
    }
    with open(path, "w") as fh:
        json.dump(header, fh, sort_keys=True)
    np.ascontiguousarray(array, dtype=_RAW_DTYPES[dtype_tag]).tofile(path.with_suffix(".raw"))


def _read_volume(path) -> tuple[np.ndarray, tuple]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    if _is_nifti(path):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        # nibabel silently replaces zero pixdim with 1; read the stored values
        with nib.openers.ImageOpener(str(path)) as fh:
            raw_header = nib.Nifti1Header.from_fileobj(fh, check=False)
        zooms = tuple(float(z) for z in raw_header["pixdim"][1:4])
        if data.ndim != 3:
            raise VolumeFormatError(f"expected 3D volume, got {data.ndim}D in {path}")
        return data, zooms[:3]
    if path.suffix == ".json":
        data, spacing = _read_raw(path)
        if data.ndim != 3:
            raise VolumeFormatError(f"expected 3D volume, got {data.ndim}D in {path}")
        return data, spacing
    raise VolumeFormatError(f"unrecognised volume format: {path}")


def read_shape(path) -> tuple[int, ...]:
    path = Path(path)
    if _is_nifti(path):
        import nibabel as nib

        return tuple(nib.load(str(path)).shape)
    with open(path) as fh:
        return tuple(json.load(fh)["shape"])


def load_stack(path, split_tag: str = "train", subject_id: str = "") -> Stack:
    data, spacing = _read_volume(path)
    data = np.asarray(data, dtype=np.float32)
    if np.isnan(data).any():
        raise VolumeFormatError(f"NaN intensities in {path}")
    return Stack(
        voxels=data,
        spacing=spacing,
        stack_id=_stem(Path(path)),
        subject_id=subject_id,
        split_tag=split_tag,
    )


def load_mask(path, source: str = "ground_truth") -> MaskStack:
    data, _ = _read_volume(path)
    return MaskStack(labels=np.asarray(data), source=source)


def _write_nifti(path: Path, array: np.ndarray, spacing) -> None:
    import nibabel as nib

    img = nib.Nifti1Image(array, affine=np.diag([*spacing, 1.0]))
    img.header.set_zooms(tuple(spacing))
    nib.save(img, str(path))


def save_stack(stack: Stack, path) -> Path:
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, stack.voxels.astype(np.float32), stack.spacing)
    elif path.suffix == ".json":
        _write_raw(path, stack.voxels, stack.spacing, "f32-le")
    else:
        raise VolumeFormatError(f"unrecognised volume format: {path}")
    return path


def save_mask(mask: MaskStack, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, mask.labels.astype(np.uint8), spacing)
    elif path.suffix == ".json":
        _write_raw(path, mask.labels, spacing, "u8")
    else:
        raise VolumeFormatError(f"unrecognised volume format: {path}")
    return path


def normalize_slice(slice2d: np.ndarray, lower: float = 1.0, upper: float = 99.0) -> np.ndarray:
    """Clip to the slice's [lower, upper] percentiles, then rescale to [0, 1].

    A slice whose percentile range collapses (e.g. constant intensity) maps to zeros.
    """
    x = np.asarray(slice2d, dtype=np.float64)
    lo, hi = np.percentile(x, [lower, upper])
    if not hi > lo:
        return np.zeros(x.shape, dtype=np.float32)
    out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return out.astype(np.float32)


def normalize_stack(stack: Stack) -> np.ndarray:
    out = np.empty(stack.shape, dtype=np.float32)
    for k in range(stack.n_slices):
        out[:, :, k] = normalize_slice(stack.slice(k))
    return out


@dataclass(frozen=True)
class CropRecord:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.top, self.bottom, self.left, self.right)

    @property
    def empty(self) -> bool:
        return self.as_tuple() == (0, 0, 0, 0)

    def apply(self, padded: np.ndarray) -> np.ndarray:
        """Undo the padding on the two leading axes."""
        h, w = padded.shape[:2]
        return padded[self.top : h - self.bottom, self.left : w - self.right]


def _split_pad(size: int, factor: int) -> tuple[int, int]:
    total = -size % factor
    return total // 2, total - total // 2


def pad_to_multiple(slice2d: np.ndarray, factor: int) -> tuple[np.ndarray, CropRecord]:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = slice2d.shape[:2]
    top, bottom = _split_pad(h, factor)
    left, right = _split_pad(w, factor)
    pad = [(top, bottom), (left, right)] + [(0, 0)] * (slice2d.ndim - 2)
    return np.pad(slice2d, pad), CropRecord(top, bottom, left, right)


def pad_to_shape(slice2d: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, CropRecord]:
    """Zero-pad symmetrically up to ``shape`` (each target dim >= the source dim)."""
    h, w = slice2d.shape[:2]
    dh, dw = shape[0] - h, shape[1] - w
    if dh < 0 or dw < 0:
        raise ValueError(f"cannot pad {slice2d.shape} down to {shape}")
    rec = CropRecord(dh // 2, dh - dh // 2, dw // 2, dw - dw // 2)
    pad = [(rec.top, rec.bottom), (rec.left, rec.right)] + [(0, 0)] * (slice2d.ndim - 2)
    return np.pad(slice2d, pad), rec


def extract_patches(
    volume: np.ndarray, centers: np.ndarray, sizes: Sequence[int] = PATCH_SIZES
) -> dict[int, np.ndarray]:
    """Gather zero-padded square patches around ``centers`` (N x 3 of row, col, slice).

    Returns ``{size: array (N, size, size)}``.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    margin = max(sizes) // 2
    padded = np.pad(volume, [(margin, margin), (margin, margin), (0, 0)])
    out = {}
    for size in sizes:
        half = size // 2
        offs = np.arange(-half, half + 1)
        rows = centers[:, 0, None, None] + margin + offs[None, :, None]
        cols = centers[:, 1, None, None] + margin + offs[None, None, :]
        out[size] = padded[rows, cols, centers[:, 2, None, None]].astype(np.float32)
    return out


def sample_centers(mask: MaskStack, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``ceil(n/2)`` brain and ``n - ceil(n/2)`` background centres with replacement.

    Returns (centers N x 3, labels N). Brain-class centres come first.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    flat = mask.labels.reshape(-1)
    brain = np.flatnonzero(flat == 1)
    background = np.flatnonzero(flat == 0)
    n_brain = math.ceil(n / 2)
    if brain.size == 0:
        warnings.warn("mask has no brain voxels; all samples are non-brain", EmptyMaskWarning)
        picks = background[rng.integers(0, background.size, size=n)]
    elif background.size == 0:
        warnings.warn("mask has no background voxels; all samples are brain", EmptyMaskWarning)
        picks = brain[rng.integers(0, brain.size, size=n)]
    else:
        picks = np.concatenate(
            [
                brain[rng.integers(0, brain.size, size=n_brain)],
                background[rng.integers(0, background.size, size=n - n_brain)],
            ]
        )
    centers = np.stack(np.unravel_index(picks, mask.shape), axis=1)
    return centers, flat[picks].astype(np.int64)


def sample_patches(
    stack: Stack,
    mask: MaskStack,
    n: int,
    seed: int,
    sizes: Sequence[int] = PATCH_SIZES,
    normalize: bool = True,
) -> list[PatchSample]:
    """Class-balanced multi-scale patch samples.

    Patches are cut from per-slice normalized intensities unless ``normalize`` is
    False, and are zero-padded where they leave the slice.
    """
    mask.check_congruent(stack)
    centers, labels = sample_centers(mask, n, seed)
    volume = normalize_stack(stack) if normalize else stack.voxels
    patches = extract_patches(volume, centers, sizes)
    return [
        PatchSample(
            patches={s: patches[s][i] for s in sizes},
            center=tuple(int(c) for c in centers[i]),
            label=int(labels[i]),
        )
        for i in range(len(labels))
    ]


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path
