"""Probability thresholding, largest 3D connected component, and ball closing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import MaskStack

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class PostprocConfig:
    threshold: float = 0.5
    connectivity: int = 26
    closing_radius: int = 5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.connectivity not in _CONNECTIVITY_RANK:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.closing_radius < 0:
            raise ValueError("closing radius must be >= 0")


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, MaskStack) else np.asarray(mask, dtype=np.uint8)


def threshold_probs(probs: np.ndarray, t: float = 0.5) -> MaskStack:
    probs = np.asarray(probs)
    if probs.size and (np.isnan(probs).any() or probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return MaskStack(labels=(probs > t).astype(np.uint8), source="predicted")


def structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])


def largest_component_3d(mask, connectivity: int = 26) -> MaskStack:
    """Keep the largest component by voxel count.

    Labels are assigned in raster order, so on ties the component whose first
    voxel comes first lexicographically wins.
    """
    labels = _labels(mask)
    comp, n = ndimage.label(labels, structure=structure(connectivity))
    if n == 0:
        return MaskStack(labels=np.zeros_like(labels), source="predicted")
    sizes = np.bincount(comp.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return MaskStack(labels=(comp == keep).astype(np.uint8), source="predicted")


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    z, y, x = np.ogrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (x * x + y * y + z * z) <= r * r


def morph_close(mask, radius: int = 5) -> MaskStack:
    """Dilation then erosion by a voxel-space ball.

    The grid is treated as embedded in an infinite empty background, so the
    result is extensive and idempotent right up to the borders.
    """
    labels = _labels(mask)
    if radius == 0:
        return MaskStack(labels=labels.copy(), source="predicted")
    se = ball(radius)
    r = int(radius)
    padded = np.pad(labels.astype(bool), r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, structure=se), structure=se)
    inner = closed[r:-r, r:-r, r:-r]
    return MaskStack(labels=inner.astype(np.uint8), source="predicted")


def postprocess(probs: np.ndarray, config: PostprocConfig | None = None) -> MaskStack:
    """threshold -> largest component -> closing.

    Closing a connected set can in principle leave voxels that touch the rest
    only diagonally; if that happens the largest component is taken once more
    so the output is always a single component.
    """
    config = config or PostprocConfig()
    mask = threshold_probs(probs, config.threshold)
    mask = largest_component_3d(mask, config.connectivity)
    closed = morph_close(mask, config.closing_radius)
    if count_components(closed, config.connectivity) > 1:
        closed = largest_component_3d(closed, config.connectivity)
    return closed


def count_components(mask, connectivity: int = 26) -> int:
    return int(ndimage.label(_labels(mask), structure=structure(connectivity))[1])
