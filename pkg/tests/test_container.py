import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlhumor import container


def test_roundtrip_uint8(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path = container.write_tensor(tmp_path / "t.cvt", arr)
    back = container.read_tensor(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, arr)


def test_roundtrip_float32_exact(tmp_path):
    arr = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
    back = container.read_tensor(container.write_tensor(tmp_path / "t.cvt", arr))
    assert back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_header_layout():
    arr = np.zeros((2, 3), dtype=np.uint8)
    raw = container.tensor_bytes(arr)
    assert raw[:4] == b"CVT1"
    assert raw[4] == 0  # dtype code u8
    assert raw[5] == 2  # rank
    assert raw[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(raw) == 14 + 6


def test_scalar_rank_zero():
    arr = np.float32(3.5)
    back = container.tensor_from_bytes(container.tensor_bytes(np.asarray(arr)))
    assert back.shape == ()
    assert back == np.float32(3.5)


def test_rejects_bad_magic():
    with pytest.raises(container.ContainerError, match="magic"):
        container.tensor_from_bytes(b"NOPE" + b"\x00" * 10)


def test_rejects_truncated_payload():
    raw = container.tensor_bytes(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(container.ContainerError, match="payload"):
        container.tensor_from_bytes(raw[:-1])


def test_rejects_unsupported_dtype():
    with pytest.raises(container.ContainerError, match="dtype"):
        container.tensor_bytes(np.zeros(3, dtype=np.int32))


@settings(deadline=None, max_examples=50)
@given(
    shape=st.lists(st.integers(0, 5), min_size=1, max_size=4),
    use_u8=st.booleans(),
)
def test_roundtrip_property(shape, use_u8):
    rng = np.random.default_rng(42)
    if use_u8:
        arr = rng.integers(0, 256, size=shape).astype(np.uint8)
    else:
        arr = rng.standard_normal(shape).astype(np.float32)
    back = container.tensor_from_bytes(container.tensor_bytes(arr))
    assert back.shape == tuple(shape)
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)
