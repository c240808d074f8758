import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalora.serialization import MAGIC, FormatError, decode_tensor, encode_tensor, read_checkpoint, write_checkpoint


def test_header_layout():
    buf = encode_tensor(np.arange(6.0).reshape(2, 3))
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<BI2I", buf, 8) == (8, 2, 2, 3)
    assert len(buf) == 8 + 1 + 4 + 8 + 6 * 8


@given(st.lists(st.integers(1, 4), max_size=4), st.sampled_from([np.float32, np.float64]), st.integers(0, 2**32 - 1))
def test_round_trip_is_exact(shape, dtype, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    back = decode_tensor(encode_tensor(arr))
    assert back.dtype == dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_rejects_corruption():
    buf = encode_tensor(np.ones(3))
    with pytest.raises(FormatError):
        decode_tensor(b"NOTMAGIC" + buf[8:])
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(FormatError):
        decode_tensor(buf[:8] + bytes([2]) + buf[9:])


def test_checkpoint_round_trip(tmp_path):
    arrays = {"A": np.ones((2, 3)), "B": np.arange(3.0)}
    write_checkpoint(tmp_path / "ck", {"variant": "x"}, arrays)
    manifest, back = read_checkpoint(tmp_path / "ck")
    assert manifest["variant"] == "x"
    assert set(back) == {"A", "B"}
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
