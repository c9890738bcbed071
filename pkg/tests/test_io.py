import struct

import numpy as np
import pytest

from gridcal.io import (
    TensorFormatError,
    TruncatedTensorError,
    encode_tensor,
    load_checkpoint,
    read_kv,
    read_tensor,
    save_checkpoint,
    write_kv,
    write_tensor,
)


def test_float_round_trip(tmp_path):
    t = np.random.default_rng(0).uniform(0, 255, size=(8, 8, 8)).astype(np.float32)
    write_tensor(t, tmp_path / "t.grt")
    back = read_tensor(tmp_path / "t.grt")
    assert back.dtype == np.float32 and back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_uint8_round_trip(tmp_path):
    t = np.random.default_rng(1).integers(0, 256, size=(3, 5, 8), dtype=np.uint8)
    write_tensor(t, tmp_path / "t.grt")
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.grt"), t)


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.uint8))
    assert buf[:4] == b"GRT1"
    assert struct.unpack("<HBB", buf[4:8]) == (1, 0, 2)
    assert struct.unpack("<2I", buf[8:16]) == (2, 3)
    assert len(buf) == 16 + 6


def test_bad_magic(tmp_path):
    buf = bytearray(encode_tensor(np.zeros((2, 2), dtype=np.float32)))
    buf[:4] = b"XXXX"
    (tmp_path / "bad.grt").write_bytes(bytes(buf))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(tmp_path / "bad.grt")


def test_version_mismatch(tmp_path):
    buf = bytearray(encode_tensor(np.zeros((2, 2), dtype=np.float32)))
    buf[4:6] = struct.pack("<H", 2)
    (tmp_path / "v.grt").write_bytes(bytes(buf))
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(tmp_path / "v.grt")


def test_truncated_payload(tmp_path):
    buf = encode_tensor(np.zeros((4, 4), dtype=np.float32))
    (tmp_path / "t.grt").write_bytes(buf[:-1])
    with pytest.raises(TruncatedTensorError):
        read_tensor(tmp_path / "t.grt")


def test_dims_inconsistent_with_payload(tmp_path):
    buf = bytearray(encode_tensor(np.zeros((2, 2), dtype=np.uint8)))
    buf[8:12] = struct.pack("<I", 2**32 - 1)  # absurd dimension
    (tmp_path / "t.grt").write_bytes(bytes(buf))
    with pytest.raises(TruncatedTensorError):
        read_tensor(tmp_path / "t.grt")


def test_unsupported_dtype():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros(3, dtype=np.int32))


def test_checkpoint_round_trip(tmp_path):
    params = {"0.weight": np.arange(6.0).reshape(2, 3), "0.bias": np.ones(3), "scalar": np.float32(2.5)}
    save_checkpoint(params, tmp_path / "m.grt", {"arch": "conv"})
    back, meta = load_checkpoint(tmp_path / "m.grt")
    assert meta == {"arch": "conv"}
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    manifest = (tmp_path / "m.grt.manifest").read_text().splitlines()
    assert manifest[1].split("\t") == ["0.weight", "2x3", "0"]


def test_kv_round_trip(tmp_path):
    write_kv(tmp_path / "m.txt", {"method": "tta", "M": 8})
    assert read_kv(tmp_path / "m.txt") == {"method": "tta", "M": "8"}
