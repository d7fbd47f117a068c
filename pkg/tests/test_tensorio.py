import io

import numpy as np
import pytest

from avalign import tensorio


def test_blob_round_trip_1d():
    fh = io.BytesIO()
    arr = np.arange(7, dtype=np.float32)
    off, nbytes = tensorio.write_blob(fh, arr)
    assert off == 0
    back = tensorio.read_blob(fh.getvalue(), off)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float32


def test_blob_round_trip_shapes():
    fh = io.BytesIO()
    offsets = []
    arrays = [np.zeros((2, 3, 4)), np.ones((5,)), np.full((1, 1, 2, 2), 3.5)]
    for a in arrays:
        off, _ = tensorio.write_blob(fh, a.astype(np.float32))
        offsets.append(off)
    buf = fh.getvalue()
    for off, a in zip(offsets, arrays):
        np.testing.assert_array_equal(tensorio.read_blob(buf, off), a)


def test_blob_offsets_are_cumulative():
    fh = io.BytesIO()
    off1, n1 = tensorio.write_blob(fh, np.zeros(3, dtype=np.float32))
    off2, _ = tensorio.write_blob(fh, np.zeros(3, dtype=np.float32))
    assert off2 == off1 + n1


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "m.avck")
    tensors = {
        "enc.w": np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32),
        "enc.b": np.zeros(4, dtype=np.float64),
        "steps": np.array([1, 2, 3], dtype=np.int64),
    }
    meta = {"kind": "avalign-model", "num_classes": 6}
    tensorio.save_checkpoint(path, tensors, meta)
    loaded, meta2 = tensorio.load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
        assert loaded[k].dtype == tensors[k].dtype


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "x.avck")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        tensorio.load_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    path = str(tmp_path / "x.avck")
    tensorio.save_checkpoint(path, {"a": np.zeros(2, dtype=np.float32)}, {})
    with open(path, "ab") as fh:
        fh.write(b"\x01")
    with pytest.raises(ValueError, match="trailing"):
        tensorio.load_checkpoint(path)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    path = str(tmp_path / "x.avck")
    with pytest.raises(ValueError):
        tensorio.save_checkpoint(path, {"a": np.zeros(2, dtype=np.complex128)}, {})
