"""Per-slice streaming segmentation.

Wire format, one frame per slice::

    uint32 little-endian  header length N
    N bytes               UTF-8 JSON {"shape": [h, w], "dtype": "f32-le", "slice_index": k}
    h*w*itemsize bytes    pixels, C order

Input frames carry ``f32-le`` intensities; emitted mask frames use ``u8``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

import numpy as np

from .data import load_stack
from .evaluation import timing_stats
from .inference import slice_probs
from .models import Checkpoint
from .postproc import threshold_probs

log = logging.getLogger(__name__)

_DTYPES = {"f32-le": np.dtype("<f4"), "u8": np.dtype("u1")}
_LEN = struct.Struct("<I")
MAX_HEADER = 1 << 16


class FrameError(ValueError):
    """A frame whose header or payload is unusable; the stream itself stays aligned."""


class StreamBroken(IOError):
    """The byte stream cannot be re-synchronised (truncated or unparseable header)."""


def encode_frame(array: np.ndarray, slice_index: int, dtype: str = "f32-le") -> bytes:
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype, "slice_index": int(slice_index)}).encode()
    return _LEN.pack(len(header)) + header + arr.tobytes()


def write_frame(fh: BinaryIO, array: np.ndarray, slice_index: int, dtype: str = "f32-le") -> None:
    fh.write(encode_frame(array, slice_index, dtype))
    fh.flush()


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = fh.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frames(fh: BinaryIO) -> Iterator[tuple[dict, np.ndarray] | FrameError]:
    """Yield ``(header, array)`` per frame, or a FrameError for a bad but skippable frame.

    A frame is skippable when its header parses far enough to know the payload
    length.  Anything worse raises StreamBroken.
    """
    while True:
        raw_len = _read_exact(fh, _LEN.size)
        if not raw_len:
            return
        if len(raw_len) < _LEN.size:
            raise StreamBroken("truncated frame length")
        (n,) = _LEN.unpack(raw_len)
        if n > MAX_HEADER:
            raise StreamBroken(f"frame header length {n} is implausible")
        raw_header = _read_exact(fh, n)
        try:
            header = json.loads(raw_header)
            shape = [int(s) for s in header["shape"]]
            dtype = _DTYPES[header.get("dtype", "f32-le")]
        except (ValueError, KeyError, TypeError) as exc:
            raise StreamBroken(f"unparseable frame header: {exc}") from exc
        nbytes = math.prod(shape) * dtype.itemsize
        payload = _read_exact(fh, nbytes)
        if len(payload) < nbytes:
            raise StreamBroken("truncated frame payload")
        if len(shape) != 2 or min(shape) < 1:
            yield FrameError(f"frame {header.get('slice_index')}: expected a 2D slice, got shape {shape}")
            continue
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            yield FrameError(f"frame {header.get('slice_index')}: non-finite pixels")
            continue
        yield header, arr


@dataclass
class Arrival:
    index: int
    pixels: Optional[np.ndarray]
    arrived: float
    error: Optional[str] = None


def stack_source(path, period: float = 0.0) -> Iterator[Arrival]:
    """Slices of a stored stack, released every ``period`` seconds."""
    stack = load_stack(path)
    start = time.perf_counter()
    for k in range(stack.n_slices):
        if period > 0:
            delay = start + k * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        yield Arrival(k, stack.slice(k).copy(), time.perf_counter())


def frame_source(fh: BinaryIO) -> Iterator[Arrival]:
    for i, item in enumerate(read_frames(fh)):
        if isinstance(item, FrameError):
            yield Arrival(i, None, time.perf_counter(), error=str(item))
        else:
            header, arr = item
            yield Arrival(int(header.get("slice_index", i)), arr, time.perf_counter())


def directory_source(directory, idle_timeout: float = 2.0, poll: float = 0.05) -> Iterator[Arrival]:
    """Frame files (one frame each) appearing in ``directory``, in arrival (mtime) order.

    Stops after ``idle_timeout`` seconds without a new file.
    """
    directory = Path(directory)
    seen: set[str] = set()
    last_new = time.perf_counter()
    count = 0
    while True:
        fresh = [p for p in directory.iterdir() if p.is_file() and p.name not in seen and not p.name.startswith(".")]
        fresh.sort(key=lambda p: (p.stat().st_mtime_ns, p.name))
        for p in fresh:
            seen.add(p.name)
            last_new = time.perf_counter()
            with open(p, "rb") as fh:
                try:
                    for arrival in frame_source(fh):
                        arrival.index = arrival.index if arrival.error is None else count
                        yield arrival
                        count += 1
                except StreamBroken as exc:
                    yield Arrival(count, None, time.perf_counter(), error=f"{p.name}: {exc}")
                    count += 1
        if not fresh:
            if time.perf_counter() - last_new > idle_timeout:
                return
            time.sleep(poll)


@dataclass
class StreamResult:
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    latencies: list[float] = field(default_factory=list)
    compute_seconds: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    period: float = 1.0

    def summary(self) -> dict:
        out = {"frames": len(self.masks), "errors": self.errors, "acquisition_period": self.period}
        if self.latencies:
            t = timing_stats(self.latencies)
            out.update({"latency_mean": t.mean, "latency_p50": t.p50, "latency_p95": t.p95})
            out["realtime"] = t.p95 < self.period
        else:
            out["realtime"] = True
        return out


_DONE = object()


def run_stream(
    ckpt: Checkpoint,
    source: Iterator[Arrival],
    emit: Optional[BinaryIO] = None,
    period: float = 1.0,
    threshold: float = 0.5,
) -> StreamResult:
    """Segment slices as they arrive.

    A reader thread pulls from ``source`` while the caller's thread segments, so
    acquisition and inference overlap; masks are emitted in arrival order.
    Latency is measured from arrival to emission.
    """
    q: queue.Queue = queue.Queue()
    failure: list[BaseException] = []

    def reader():
        try:
            for item in source:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            failure.append(exc)
        finally:
            q.put(_DONE)

    thread = threading.Thread(target=reader, name="slice-reader", daemon=True)
    thread.start()
    result = StreamResult(period=period)
    while True:
        item = q.get()
        if item is _DONE:
            break
        if item.error is not None:
            log.warning("skipping frame: %s", item.error)
            result.errors.append(item.error)
            continue
        t0 = time.perf_counter()
        mask = threshold_probs(slice_probs(ckpt, item.pixels)[:, :, None], threshold).labels[:, :, 0]
        if emit is not None:
            write_frame(emit, mask, item.index, dtype="u8")
        done = time.perf_counter()
        result.masks[item.index] = mask
        result.compute_seconds.append(done - t0)
        result.latencies.append(done - item.arrived)
        log.info("slice %d latency %.4f s", item.index, done - item.arrived)
    thread.join()
    if failure:
        result.errors.append(f"stream broken: {failure[0]}")
    return result


def write_latency_log(result: StreamResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("frame,latency_seconds,compute_seconds\n")
        for i, (lat, comp) in enumerate(zip(result.latencies, result.compute_seconds)):
            fh.write(f"{i},{lat!r},{comp!r}\n")


def stdin_binary() -> BinaryIO:
    return os.fdopen(os.dup(0), "rb")
