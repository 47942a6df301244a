import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from agfusion.tensor_io import (
    FormatError,
    decode_tensor,
    decode_weights,
    encode_tensor,
    encode_weights,
    read_tensor,
    write_tensor,
)

any_float = st.floats(allow_nan=False, allow_infinity=True, width=64)


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5), elements=any_float))
def test_tensor_roundtrip_bit_exact(a):
    back = decode_tensor(encode_tensor(a))
    assert back.shape == a.shape and back.tobytes() == a.tobytes()


def test_tensor_layout_is_little_endian():
    buf = encode_tensor(np.array([[1.0, -2.0, 0.5]]))
    assert buf[:4] == b"AGT1"
    assert struct.unpack("<HHII", buf[4:16]) == (1, 2, 1, 3)
    assert struct.unpack("<3d", buf[16:]) == (1.0, -2.0, 0.5)
    assert len(buf) == 16 + 24


def test_tensor_file_roundtrip(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 3, 2))
    write_tensor(tmp_path / "a.agt", a)
    assert np.array_equal(read_tensor(tmp_path / "a.agt"), a)


@pytest.mark.parametrize("mutate, field", [
    (lambda b: b"XGT1" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "version"),
    (lambda b: b + b"\0", "payload"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b[:10], "dims"),
    (lambda b: b[:5], "header"),
])
def test_tensor_errors_name_the_field(mutate, field):
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError) as exc:
        decode_tensor(mutate(buf))
    assert exc.value.field.endswith(field)


names = st.text(st.characters(min_codepoint=97, max_codepoint=122) | st.just("."), min_size=1, max_size=12)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(names, hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                         elements=any_float), max_size=6))
def test_weights_roundtrip_bit_exact(arrays):
    back = decode_weights(encode_weights(arrays))
    assert list(back) == sorted(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_weights_encoding_is_order_independent():
    a = {"b": np.ones(2), "a": np.zeros((1, 3))}
    assert encode_weights(a) == encode_weights(dict(reversed(list(a.items()))))


def test_weights_errors():
    good = encode_weights({"a": np.ones(2), "b": np.zeros(3)})
    with pytest.raises(FormatError, match="weights.magic"):
        decode_weights(b"AGT1" + good[4:])
    with pytest.raises(FormatError, match="trailing"):
        decode_weights(good + b"\0")
    with pytest.raises(FormatError):
        decode_weights(good[:-8])
    with pytest.raises(FormatError, match="manifest"):
        decode_weights(good[:14])
    with pytest.raises(FormatError, match="header"):
        decode_weights(good[:6])
