import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnkit.errors import ContractError, InvalidInputError
from bnnkit.tensor import (BitTensor, DEFAULT_T_CLIP, pack_bits, sign_dense, sign_forward,
                           ste_backward, unpack_bits, words_for)

from conftest import pm1

shapes = st.tuples(st.integers(0, 3), st.integers(1, 200), st.integers(1, 4), st.integers(1, 4))


@given(shapes, st.integers(0, 2**31))
def test_pack_unpack_roundtrip(shape, seed):
    x = pm1(np.random.default_rng(seed), shape)
    b = pack_bits(x)
    assert b.words.shape == (shape[0], shape[2], shape[3], words_for(shape[1]))
    assert b.pad_popcount() == 0
    np.testing.assert_array_equal(unpack_bits(b), x)


def test_bit_layout_is_lsb_first_channel_major():
    x = -np.ones((1, 70, 1, 1), np.float32)
    x[0, [0, 3, 64, 69], 0, 0] = 1
    w = pack_bits(x).words[0, 0, 0]
    assert int(w[0]) == 0b1001
    assert int(w[1]) == (1 << 0) | (1 << 5)


def test_sign_of_zero_is_plus_one():
    x = np.array([-0.0, 0.0, -1e-30, 1e-30, -2.5, 3.0]).reshape(1, 6, 1, 1)
    np.testing.assert_array_equal(unpack_bits(sign_forward(x)).ravel(), [1, 1, -1, 1, -1, 1])
    np.testing.assert_array_equal(sign_dense(x).ravel(), [1, 1, -1, 1, -1, 1])


def test_ste_mask_boundary_is_inclusive():
    t = DEFAULT_T_CLIP
    x = np.array([-t, t, np.nextafter(t, 2), np.nextafter(-t, -2), 0.0, 5.0])
    up = np.arange(1.0, 7.0)
    np.testing.assert_array_equal(ste_backward(x, up), [1, 2, 0, 0, 5, 0])


def test_ste_errors():
    with pytest.raises(ContractError):
        ste_backward(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidInputError):
        ste_backward(np.zeros(3), np.zeros(3), t_clip=0.0)


def test_pack_rejects_non_binary_values():
    with pytest.raises(InvalidInputError):
        pack_bits(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
    with pytest.raises(ContractError):
        pack_bits(np.ones((2, 2)))


def test_bittensor_validates_words_and_is_read_only():
    with pytest.raises(ContractError):
        BitTensor((1, 65, 1, 1), np.zeros((1, 1, 1, 1), np.uint64))
    b = pack_bits(np.ones((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        b.words[0, 0, 0, 0] = 0


@given(st.integers(1, 200), st.data())
def test_channel_slice_matches_dense_slice(c, data):
    start = data.draw(st.integers(0, c))
    stop = data.draw(st.integers(start, c))
    x = pm1(np.random.default_rng(c), (2, c, 2, 3))
    sub = pack_bits(x).channel_slice(start, stop)
    assert sub.pad_popcount() == 0
    assert sub == pack_bits(x[:, start:stop])


def test_channel_slice_bounds():
    with pytest.raises(ContractError):
        pack_bits(np.ones((1, 4, 1, 1))).channel_slice(2, 5)


def test_empty_batch_packs():
    b = pack_bits(np.ones((0, 5, 2, 2)))
    assert b.shape == (0, 5, 2, 2) and unpack_bits(b).shape == (0, 5, 2, 2)
