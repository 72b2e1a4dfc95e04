import struct

import numpy as np
import pytest

from logcan.serialization import (
    FormatError,
    decode_checkpoint,
    encode_checkpoint,
    encode_tensor,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
from logcan.tensor import Tensor


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_round_trip_is_bitwise(tmp_path, rng, dtype):
    x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(dtype))
    save_tensor(tmp_path / "x.lgt", x)
    y = load_tensor(tmp_path / "x.lgt")
    assert y.dtype == dtype and y.shape == x.shape
    assert y.data.tobytes() == x.data.tobytes()


def test_special_values_survive(tmp_path):
    x = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45], dtype=np.float32)
    save_tensor(tmp_path / "x.lgt", x)
    assert load_tensor(tmp_path / "x.lgt").data.tobytes() == x.tobytes()


def test_header_layout():
    raw = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:4] == b"LGT1"
    assert raw[4] == 2 and raw[5] == 0
    assert struct.unpack_from("<2I", raw, 6) == (2, 3)
    assert np.frombuffer(raw[14:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_empty_extent_rejected_at_save(tmp_path):
    with pytest.raises(ValueError, match="empty extent"):
        save_tensor(tmp_path / "x.lgt", np.zeros((2, 0)))


def test_truncated_payload(tmp_path):
    raw = encode_tensor(np.ones((4, 4), np.float32))
    (tmp_path / "x.lgt").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated payload") as info:
        load_tensor(tmp_path / "x.lgt")
    assert info.value.offset == 14


@pytest.mark.parametrize(
    "mutate,message,offset",
    [
        (lambda b: b"XGT1" + b[4:], "bad magic", 0),
        (lambda b: b[:4] + bytes([9]) + b[5:], "rank 9", 4),
        (lambda b: b[:5] + bytes([7]) + b[6:], "dtype code 7", 5),
        (lambda b: b[:6] + struct.pack("<I", 0) + b[10:], "extent 0 is zero", 6),
        (lambda b: b[:3], "truncated LGT1 header", 0),
        (lambda b: b + b"\0", "trailing", 18),
    ],
)
def test_corruptions_report_offsets(tmp_path, mutate, message, offset):
    raw = mutate(encode_tensor(np.ones((2,), np.float32)))
    (tmp_path / "x.lgt").write_bytes(raw)
    with pytest.raises(FormatError, match=message) as info:
        load_tensor(tmp_path / "x.lgt")
    assert info.value.offset == offset
    assert f"byte offset {offset}" in str(info.value)


def test_checkpoint_round_trip(tmp_path, rng):
    entries = {
        "a.weight": Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32)),
        "a.bias": Tensor(rng.standard_normal(3).astype(np.float32)),
        "b/ü": Tensor(rng.standard_normal((2, 2))),
    }
    save_checkpoint(tmp_path / "m.lgc", entries)
    loaded = load_checkpoint(tmp_path / "m.lgc")
    assert list(loaded) == list(entries)
    for k in entries:
        assert loaded[k].data.tobytes() == entries[k].data.tobytes()
        assert loaded[k].dtype == entries[k].dtype


def test_checkpoint_layout():
    raw = encode_checkpoint({"w": np.ones(1, np.float32)})
    assert raw[:4] == b"LGC1"
    assert struct.unpack_from("<I", raw, 4) == (1,)
    assert struct.unpack_from("<H", raw, 8) == (1,)
    assert raw[10:11] == b"w" and raw[11:15] == b"LGT1"


def test_checkpoint_corruption_offsets():
    raw = encode_checkpoint({"w": np.ones(2, np.float32), "v": np.ones(1, np.float32)})
    with pytest.raises(FormatError, match="truncated") as info:
        decode_checkpoint(raw[:-1])
    assert info.value.offset > 8
    with pytest.raises(FormatError, match="bad magic"):
        decode_checkpoint(b"LGT1" + raw[4:])
    with pytest.raises(FormatError, match="truncated LGC1 header"):
        decode_checkpoint(raw[:5])
    # entry count larger than the file holds
    with pytest.raises(FormatError, match="truncated entry"):
        decode_checkpoint(raw[:4] + struct.pack("<I", 3) + raw[8:])
