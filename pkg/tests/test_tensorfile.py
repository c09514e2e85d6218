import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seamcam import tensorfile
from seamcam.errors import ParseError


def test_v1_roundtrip_quantizes_to_float32(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4))
    path = tmp_path / "t.bin"
    tensorfile.save_tensor(path, arr, version=1)
    back = tensorfile.load_tensor(path)
    assert back.shape == arr.shape
    assert np.abs(back - arr).max() <= np.abs(arr).max() * 1e-6


def test_v2_roundtrip_exact(tmp_path, rng):
    arr = rng.normal(size=(3, 5))
    path = tmp_path / "t.bin"
    tensorfile.save_tensor(path, arr, version=2)
    assert np.array_equal(tensorfile.load_tensor(path), arr)


def test_header_layout():
    payload = tensorfile.tensor_bytes(np.zeros((2, 3), dtype=np.float32))
    assert payload[:4] == b"SEAM"
    assert int.from_bytes(payload[4:8], "little") == 1
    assert int.from_bytes(payload[8:12], "little") == 2
    assert int.from_bytes(payload[12:16], "little") == 2
    assert int.from_bytes(payload[16:20], "little") == 3
    assert len(payload) == 20 + 6 * 4


def test_bad_magic_reports_offset():
    with pytest.raises(ParseError, match="byte 0"):
        tensorfile.read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 20))


def test_truncated_payload_reports_offset(tmp_path, rng):
    arr = rng.normal(size=(4, 4))
    blob = tensorfile.tensor_bytes(arr)
    with pytest.raises(ParseError, match="truncated"):
        tensorfile.read_tensor(io.BytesIO(blob[:-8]))


def test_trailing_bytes_rejected(tmp_path, rng):
    path = tmp_path / "t.bin"
    with open(path, "wb") as fp:
        fp.write(tensorfile.tensor_bytes(rng.normal(size=(2,))) + b"junk")
    with pytest.raises(ParseError, match="trailing"):
        tensorfile.load_tensor(path)


def test_unsupported_version_rejected():
    blob = bytearray(tensorfile.tensor_bytes(np.zeros(3)))
    blob[4] = 9
    with pytest.raises(ParseError, match="version"):
        tensorfile.read_tensor(io.BytesIO(bytes(blob)))


def test_bundle_roundtrip_with_meta(tmp_path, rng):
    tensors = {"a/x": rng.normal(size=(2, 2)), "b": rng.normal(size=(5,))}
    meta = {"step": "42", "note": "hello world"}
    tensorfile.save_bundle(tmp_path / "c.bin", tmp_path / "c.idx", tensors, meta)
    back, got_meta = tensorfile.load_bundle(tmp_path / "c.bin", tmp_path / "c.idx")
    assert got_meta == meta
    for name, arr in tensors.items():
        assert np.array_equal(back[name], arr)


def test_save_is_deterministic(tmp_path, rng):
    arr = rng.normal(size=(3, 3))
    tensorfile.save_tensor(tmp_path / "a.bin", arr, version=2)
    tensorfile.save_tensor(tmp_path / "b.bin", arr, version=2)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.lists(st.integers(min_value=1, max_value=5), min_size=0, max_size=4),
       st.integers(min_value=0, max_value=2 ** 31))
def test_roundtrip_any_shape(shape, seed):
    arr = np.random.Generator(np.random.PCG64(seed)).normal(size=shape)
    buf = io.BytesIO()
    tensorfile.write_tensor(buf, arr, version=2)
    buf.seek(0)
    assert np.array_equal(tensorfile.read_tensor(buf), arr.astype(np.float64))
