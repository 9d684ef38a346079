"""Slice-by-slice segmentation of stacks with a trained checkpoint."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import MaskStack, Stack, normalize_slice, pad_to_multiple
from .models import Checkpoint, forward_probs
from .postproc import PostprocConfig, postprocess, threshold_probs


def slice_probs(ckpt: Checkpoint, slice2d: np.ndarray) -> np.ndarray:
    """Brain probability map for one raw-intensity slice."""
    x = normalize_slice(slice2d)
    if ckpt.kind == "unet":
        x, crop = pad_to_multiple(x, ckpt.config.multiple)
        return crop.apply(forward_probs(ckpt, x[None])[0])
    return forward_probs(ckpt, x[None])[0]


@dataclass
class Segmentation:
    probs: np.ndarray
    mask: MaskStack
    slice_seconds: list[float] = field(default_factory=list)
    postprocess_seconds: float = 0.0

    @property
    def total_seconds(self) -> float:
        return sum(self.slice_seconds) + self.postprocess_seconds


def segment_stack(
    ckpt: Checkpoint,
    stack: Stack,
    postprocess_config: PostprocConfig | None = None,
    threshold: float = 0.5,
) -> Segmentation:
    """Segment every slice independently; optional 3D post-processing afterwards.

    Timings cover the forward pass and post-processing only.
    """
    probs = np.empty(stack.shape, dtype=np.float32)
    seconds = []
    for k in range(stack.n_slices):
        t0 = time.perf_counter()
        probs[:, :, k] = slice_probs(ckpt, stack.slice(k))
        seconds.append(time.perf_counter() - t0)
    pp_seconds = 0.0
    if postprocess_config is not None:
        t0 = time.perf_counter()
        mask = postprocess(probs, postprocess_config)
        pp_seconds = time.perf_counter() - t0
    else:
        mask = threshold_probs(probs, threshold)
    mask.source = "predicted"
    return Segmentation(probs=probs, mask=mask, slice_seconds=seconds, postprocess_seconds=pp_seconds)
