import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensguard.errors import AddressingError, ContractError, FormatError
from ensguard.params import (
    LayerParams,
    ModelParams,
    as_tensor,
    bit_equal,
    checksum,
    decode_model,
    encode_model,
    flip_bit,
    layer_checksum,
    load_model,
    save_model,
    tensor_add,
    tensor_sub,
    words,
)


def from_bits(*patterns):
    return np.array(patterns, dtype=np.uint32).view(np.float32)


def random_model(rng, sizes):
    layers = []
    for a, b in zip(sizes, sizes[1:]):
        layers.append(LayerParams(rng.standard_normal((a, b)), rng.standard_normal(b)))
    return ModelParams(layers)


def test_flip_sign_bit():
    t = as_tensor([1.0])
    flip_bit(t, 0, 31)
    assert words(t)[0] == 0xBF800000
    assert t[0] == -1.0


def test_flip_sign_of_zero():
    t = as_tensor([0.0])
    flip_bit(t, 0, 31)
    assert words(t)[0] == 0x80000000


def test_flip_twice_is_identity():
    t = as_tensor([1.0])
    flip_bit(t, 0, 23)
    assert t[0] != 1.0
    flip_bit(t, 0, 23)
    assert words(t)[0] == 0x3F800000


def test_flip_leaves_other_elements():
    t = as_tensor([1.0, 2.0, 3.0])
    before = t.copy()
    flip_bit(t, 1, 5)
    assert words(t)[0] == words(before)[0]
    assert words(t)[2] == words(before)[2]
    assert words(t)[1] == words(before)[1] ^ (1 << 5)


@pytest.mark.parametrize("elem,bit", [(3, 0), (-1, 0), (0, 32), (0, -1)])
def test_flip_out_of_range(elem, bit):
    with pytest.raises(AddressingError):
        flip_bit(as_tensor([1.0, 2.0, 3.0]), elem, bit)


def test_flip_works_on_2d_tensor():
    t = as_tensor(np.zeros((2, 3)))
    flip_bit(t, 4, 31)
    assert words(t)[4] == 0x80000000
    assert words(t[1])[1] == 0x80000000


def test_bit_equal_examples():
    assert bit_equal(as_tensor([1.0, 2.0]), as_tensor([1.0, 2.0])).equal
    r = bit_equal(as_tensor([0.0]), as_tensor([-0.0]))
    assert (r.equal, r.first_mismatch) == (False, 0)
    nan = from_bits(0x7FC00000)
    assert bit_equal(nan, nan.copy()).equal


def test_bit_equal_shape_mismatch():
    with pytest.raises(ContractError):
        bit_equal(as_tensor([1.0]), as_tensor([1.0, 2.0]))


def test_add_sub_examples():
    np.testing.assert_array_equal(tensor_add(as_tensor([1.0, 2.0]), as_tensor([0.5, -1.0])), [1.5, 1.0])
    s = tensor_add(as_tensor([3.0]), as_tensor([4.0]))
    assert bit_equal(tensor_sub(s, as_tensor([4.0])), as_tensor([3.0])).equal
    out = tensor_add(as_tensor([1e30]), as_tensor([-1e30]))
    assert words(out)[0] == 0
    with pytest.raises(ContractError):
        tensor_add(as_tensor([1.0]), as_tensor([1.0, 1.0]))


def test_add_is_float32_rounding():
    # 1 + 2**-24 is a tie in float32 and rounds to even (1.0)
    out = tensor_add(as_tensor([1.0]), as_tensor([2.0**-24]))
    assert out.dtype == np.float32 and out[0] == np.float32(1.0)


# exactly representable sums: small integers
small_ints = st.lists(st.integers(-(2**20), 2**20), min_size=1, max_size=40)


@given(small_ints, st.data())
def test_sub_inverts_add_when_exact(xs, data):
    ys = data.draw(st.lists(st.integers(-(2**20), 2**20), min_size=len(xs), max_size=len(xs)))
    a, b = as_tensor(xs), as_tensor(ys)
    assert bit_equal(tensor_sub(tensor_add(a, b), b), a).equal


def test_checksum_examples():
    assert checksum(as_tensor([0.0, 0.0])) == (0, 0.0)
    c = checksum(as_tensor([1.0]))
    assert c.int_sum == 0x3F800000 and c.value_sum == 1.0


def test_checksum_every_single_flip_changes_int_sum():
    # oracle: exhaustive over every element and bit of a small tensor
    t = as_tensor([1.5, -0.0, 3.25e-5, float("nan")])
    base = checksum(t)
    for e in range(t.size):
        for k in range(32):
            flip_bit(t, e, k)
            assert checksum(t).int_sum != base.int_sum, (e, k)
            flip_bit(t, e, k)
    assert checksum(t).int_sum == base.int_sum


def test_value_sum_is_sequential():
    # pairwise summation would give 1.0 + (1e16 - 1e16)-style differences; check
    # against an explicit Python loop
    rng = np.random.default_rng(3)
    t = as_tensor(rng.standard_normal(1000) * 10.0 ** rng.integers(-8, 8, 1000))
    acc = 0.0
    for v in t.tolist():
        acc += v
    assert checksum(t).value_sum == acc
    assert checksum(t).int_sum == sum(int(w) for w in words(t)) % 2**64


def test_layer_checksum_chains_weights_then_bias():
    layer = LayerParams([[1.0, 2.0]], [3.0, 4.0])
    joined = as_tensor([1.0, 2.0, 3.0, 4.0])
    assert layer_checksum(layer) == checksum(joined)


def test_model_shapes_must_compose():
    with pytest.raises(ContractError):
        ModelParams([LayerParams(np.zeros((2, 3)), np.zeros(3)), LayerParams(np.zeros((4, 1)), np.zeros(1))])
    with pytest.raises(ContractError):
        ModelParams([])
    with pytest.raises(ContractError):
        LayerParams(np.zeros((2, 3)), np.zeros(2))


def assert_models_bit_equal(a, b):
    assert len(a.layers) == len(b.layers)
    for (_, _, x), (_, _, y) in zip(a.tensors(), b.tensors()):
        assert x.shape == y.shape
        assert bit_equal(x, y).equal


def test_save_load_round_trip(tmp_path):
    m = random_model(np.random.default_rng(0), [4, 8, 3])
    flip_bit(m.layers[0].weights, 0, 30)  # odd values must survive too
    m.layers[1].bias[0] = np.nan
    save_model(m, tmp_path / "m.napm")
    assert_models_bit_equal(m, load_model(tmp_path / "m.napm"))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 9), min_size=2, max_size=5))
def test_round_trip_random_shapes(seed, sizes):
    m = random_model(np.random.default_rng(seed), sizes)
    assert_models_bit_equal(m, decode_model(encode_model(m)))


def test_napm_layout_is_little_endian():
    m = ModelParams([LayerParams([[1.0]], [2.0])])
    buf = encode_model(m)
    assert buf[:4] == b"NAPM"
    assert struct.unpack("<HH", buf[4:8]) == (1, 1)
    assert struct.unpack("<BIII", buf[8:21]) == (0, 1, 1, 1)
    assert struct.unpack("<ff", buf[21:29]) == (1.0, 2.0)
    assert len(buf) == 29


def test_load_bad_magic():
    buf = bytearray(encode_model(ModelParams([LayerParams([[1.0]], [2.0])])))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_model(bytes(buf))


def test_load_truncated_names_offset():
    m = random_model(np.random.default_rng(1), [3, 4, 2])
    buf = encode_model(m)
    cut = len(buf) - 4  # drop half of the last bias tensor (2 floats)
    with pytest.raises(FormatError) as ei:
        decode_model(buf[:cut])
    assert ei.value.offset is not None
    assert "offset" in str(ei.value)


def test_load_shape_overflow():
    head = b"NAPM" + struct.pack("<HH", 1, 1) + struct.pack("<BIII", 0, 2**31, 2**31, 2**31)
    with pytest.raises(FormatError):
        decode_model(head + b"\0" * 16)
