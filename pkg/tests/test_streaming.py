import io
import os
import time

import numpy as np
import pytest

from slicebrain.data import save_stack
from slicebrain.inference import segment_stack
from slicebrain.models import UNetConfig, unet_init
from slicebrain.streaming import (
    FrameError,
    StreamBroken,
    directory_source,
    encode_frame,
    frame_source,
    read_frames,
    run_stream,
    stack_source,
    write_latency_log,
)
from slicebrain.synth import PhantomConfig, make_phantom


@pytest.fixture(scope="module")
def phantom():
    stack, mask, _ = make_phantom(PhantomConfig(shape=(32, 32, 6), brain_center=(16, 16, 3), brain_axes=(10, 8, 2.5), seed=3))
    return stack


@pytest.fixture(scope="module")
def ckpt():
    return unet_init(UNetConfig(depth=2, base_features=4), 1)


def test_frame_round_trip(rng):
    a = rng.random((5, 7), dtype=np.float32)
    b = (rng.random((5, 7)) > 0.5).astype(np.uint8)
    buf = io.BytesIO(encode_frame(a, 3) + encode_frame(b, 4, dtype="u8"))
    frames = list(read_frames(buf))
    assert frames[0][0]["slice_index"] == 3 and np.array_equal(frames[0][1], a)
    assert frames[1][0]["dtype"] == "u8" and np.array_equal(frames[1][1], b)


def test_empty_stream():
    assert list(read_frames(io.BytesIO(b""))) == []


def test_bad_frame_is_skipped_and_stream_continues(rng):
    good = rng.random((4, 4), dtype=np.float32)
    bad_shape = encode_frame(np.zeros((2, 2, 2), np.float32), 1)
    bad_pixels = encode_frame(np.full((4, 4), np.nan, np.float32), 2)
    buf = io.BytesIO(encode_frame(good, 0) + bad_shape + bad_pixels + encode_frame(good, 3))
    frames = list(read_frames(buf))
    assert isinstance(frames[1], FrameError) and isinstance(frames[2], FrameError)
    assert frames[3][0]["slice_index"] == 3


def test_truncated_stream_raises(rng):
    data = encode_frame(rng.random((4, 4), dtype=np.float32), 0)
    with pytest.raises(StreamBroken):
        list(read_frames(io.BytesIO(data[:-3])))
    with pytest.raises(StreamBroken):
        list(read_frames(io.BytesIO(b"\x05\x00\x00\x00{bad}")))


def test_stream_masks_match_batch(phantom, ckpt, tmp_path):
    save_stack(phantom, tmp_path / "s.nii")
    out = io.BytesIO()
    result = run_stream(ckpt, stack_source(tmp_path / "s.nii"), emit=out)
    batch = segment_stack(ckpt, phantom).mask.labels
    assert sorted(result.masks) == list(range(6))
    for k, m in result.masks.items():
        assert np.array_equal(m, batch[:, :, k])
    out.seek(0)
    emitted = list(read_frames(out))
    assert [h["slice_index"] for h, _ in emitted] == list(range(6))
    summary = result.summary()
    assert summary["frames"] == 6 and summary["errors"] == [] and summary["realtime"]
    write_latency_log(result, tmp_path / "lat.csv")
    assert len((tmp_path / "lat.csv").read_text().splitlines()) == 7


def test_stream_reports_corrupt_frame(phantom, ckpt):
    frames = b"".join(encode_frame(phantom.slice(k), k) for k in range(3))
    frames += encode_frame(np.zeros((1, 2, 3), np.float32), 3)
    frames += encode_frame(phantom.slice(4), 4)
    result = run_stream(ckpt, frame_source(io.BytesIO(frames)))
    assert sorted(result.masks) == [0, 1, 2, 4]
    assert len(result.errors) == 1


def test_stream_broken_is_reported(phantom, ckpt):
    frames = encode_frame(phantom.slice(0), 0) + b"\x01\x00"
    result = run_stream(ckpt, frame_source(io.BytesIO(frames)))
    assert list(result.masks) == [0]
    assert result.errors and "broken" in result.errors[0]


def test_paced_source_releases_on_schedule(phantom, tmp_path):
    save_stack(phantom, tmp_path / "s.nii")
    t0 = time.perf_counter()
    arrivals = list(stack_source(tmp_path / "s.nii", period=0.05))
    assert time.perf_counter() - t0 >= 0.05 * 5
    assert [a.index for a in arrivals] == list(range(6))


def test_directory_source_in_mtime_order(tmp_path, rng):
    names = ["c.frame", "a.frame", "b.frame"]
    for i, name in enumerate(names):
        p = tmp_path / name
        p.write_bytes(encode_frame(rng.random((3, 3), dtype=np.float32), i))
        os.utime(p, ns=(10**18 + i, 10**18 + i))
    (tmp_path / "junk.frame").write_bytes(b"\x00")
    os.utime(tmp_path / "junk.frame", ns=(10**18 + 9, 10**18 + 9))
    got = list(directory_source(tmp_path, idle_timeout=0.1, poll=0.01))
    assert [a.index for a in got[:3]] == [0, 1, 2]
    assert got[3].error is not None
