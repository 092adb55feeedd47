"""GCT1 container and manifest round trips, format rejection, endianness."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcml import tensorio
from gcml.tensorio import (
    DatasetManifest,
    TensorFormatError,
    load_manifest,
    load_tensor,
    read_tensor,
    save_manifest,
    save_tensor,
    write_tensor,
)


def roundtrip(a: np.ndarray) -> np.ndarray:
    buf = io.BytesIO()
    write_tensor(a, buf)
    buf.seek(0)
    return read_tensor(buf)


def test_known_layout_2x2():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    buf = io.BytesIO()
    write_tensor(a, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"GCT1"
    assert raw[4] == 0x01
    assert raw[5] == 2
    assert struct.unpack("<2I", raw[6:14]) == (2, 2)
    assert len(raw) == 14 + 16
    back = roundtrip(a)
    assert back.shape == (2, 2)
    assert back.tobytes() == a.tobytes()


def test_minimal_singleton():
    back = roundtrip(np.array([0.0], dtype=np.float32))
    assert back.shape == (1,)
    assert back[0] == 0.0


def test_payload_is_little_endian():
    # 1.0f is 00 00 80 3F on the wire regardless of host.
    buf = io.BytesIO()
    write_tensor(np.array([1.0], dtype=np.float32), buf)
    assert buf.getvalue()[-4:] == bytes.fromhex("0000803f")


def test_random_roundtrips_bit_exact():
    rng = np.random.default_rng(20240811)
    for _ in range(1000):
        ndim = int(rng.integers(1, 4))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        a = rng.standard_normal(shape, dtype=np.float32)
        back = roundtrip(a)
        assert back.shape == a.shape
        assert back.tobytes() == a.tobytes()


@given(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=12))
@settings(max_examples=200, deadline=None)
def test_roundtrip_property(values):
    a = np.array(values, dtype=np.float32)
    assert roundtrip(a).tobytes() == a.tobytes()


def test_nan_and_inf_survive():
    a = np.array([np.nan, np.inf, -np.inf, -0.0], dtype=np.float32)
    assert roundtrip(a).tobytes() == a.tobytes()


def test_bad_magic_rejected():
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))


def test_unsupported_dtype_rejected():
    buf = io.BytesIO()
    write_tensor(np.array([1.0], dtype=np.float32), buf)
    raw = bytearray(buf.getvalue())
    raw[4] = 0x02
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(io.BytesIO(bytes(raw)))


def test_truncated_payload_rejected():
    # Header declares 4 elements; only 3 are present.
    buf = io.BytesIO()
    write_tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32), buf)
    raw = buf.getvalue()[:-4]
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(io.BytesIO(raw))


def test_truncated_header_rejected():
    with pytest.raises(TensorFormatError):
        read_tensor(io.BytesIO(b"GCT1\x01"))


def test_zero_dimension_rejected():
    buf = io.BytesIO()
    buf.write(b"GCT1")
    buf.write(struct.pack("<BB", 0x01, 1))
    buf.write(struct.pack("<I", 0))
    buf.seek(0)
    with pytest.raises(TensorFormatError, match=">= 1"):
        read_tensor(buf)


def test_invalid_array_rejected_on_write():
    with pytest.raises(ValueError):
        write_tensor(np.float32(3.0), io.BytesIO())  # 0-d
    with pytest.raises(ValueError):
        write_tensor(np.zeros((2, 0), dtype=np.float32), io.BytesIO())


def test_trailing_bytes_rejected_by_load(tmp_path):
    path = tmp_path / "t.gct"
    save_tensor(np.array([1.0], dtype=np.float32), path)
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(TensorFormatError, match="trailing"):
        load_tensor(path)


def test_concatenated_stream_reads_in_order():
    buf = io.BytesIO()
    write_tensor(np.array([1.0], dtype=np.float32), buf)
    write_tensor(np.array([2.0, 3.0], dtype=np.float32), buf)
    buf.seek(0)
    assert read_tensor(buf).tolist() == [1.0]
    assert read_tensor(buf).tolist() == [2.0, 3.0]


def test_save_load_path(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "a.gct"
    save_tensor(a, path)
    assert load_tensor(path).tobytes() == a.tobytes()


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest(
        classes=["healthy", "affected"],
        samples=[("s0.gct", 0), ("s1.gct", 1)],
        base_dir=tmp_path,
    )
    path = tmp_path / "manifest.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.classes == m.classes
    assert back.samples == m.samples
    assert back.base_dir == tmp_path


def test_manifest_resolves_relative_paths(tmp_path):
    save_tensor(np.ones((1, 2, 2), dtype=np.float32), tmp_path / "s0.gct")
    m = DatasetManifest(classes=["a"], samples=[("s0.gct", 0)], base_dir=tmp_path)
    stack, label = m.load_sample(0)
    assert stack.shape == (1, 2, 2)
    assert label == 0


def test_manifest_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        DatasetManifest(classes=["a"], samples=[("x.gct", 1)])


def test_manifest_missing_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"samples": []}', encoding="utf-8")
    with pytest.raises(ValueError, match="malformed"):
        load_manifest(path)


def test_manifest_needs_classes():
    with pytest.raises(ValueError, match="at least one class"):
        DatasetManifest(classes=[], samples=[])
