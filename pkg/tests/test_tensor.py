import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mavnet.tensor import (NonFiniteError, Shape, argmax_over_channels, as_tensor, relu,
                           softmax_over_channels)


def test_relu_examples():
    assert np.array_equal(relu(-np.ones((1, 2, 3, 3))), np.zeros((1, 2, 3, 3)))
    x = np.arange(1, 19, dtype=float).reshape(1, 2, 3, 3)
    assert np.array_equal(relu(x), x)
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=64))
def test_relu_idempotent(values):
    x = np.array(values)
    assert np.array_equal(relu(relu(x)), relu(x))


def test_softmax_examples():
    p = softmax_over_channels(np.zeros((1, 4, 2, 2)))
    assert np.allclose(p, 0.25)
    p = softmax_over_channels(np.array([0.0, math.log(2)]).reshape(1, 2, 1, 1))
    assert np.allclose(p.ravel(), [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_shift_invariant(rng):
    z = rng.uniform(-5, 5, (2, 3, 4, 4))
    assert np.allclose(softmax_over_channels(z + 1000), softmax_over_channels(z), atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_softmax_sums_to_one(seed):
    z = np.random.default_rng(seed).uniform(-50, 50, (2, 5, 4, 4))
    p = softmax_over_channels(z)
    assert np.all(p > 0)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6


def test_softmax_needs_two_channels():
    with pytest.raises(ValueError):
        softmax_over_channels(np.zeros((1, 1, 2, 2)))


def test_argmax_examples(rng):
    onehot = np.zeros((1, 3, 2, 2))
    onehot[0, 2] = 1
    assert np.all(argmax_over_channels(onehot) == 2)
    assert np.all(argmax_over_channels(np.full((1, 3, 4, 4), 1 / 3)) == 0)

    probs = rng.random((1, 3, 8, 8))
    probs[0, 1, 0, 0] = probs[0, 2, 0, 0] = probs[0, :, 0, 0].max() + 1  # a tie
    naive = np.zeros((1, 8, 8), int)
    for r in range(8):
        for c in range(8):
            best = 0
            for k in range(1, 3):
                if probs[0, k, r, c] > probs[0, best, r, c]:
                    best = k
            naive[0, r, c] = best
    assert np.array_equal(argmax_over_channels(probs), naive)
    assert naive[0, 0, 0] == 1


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 16), st.integers(1, 16), st.data())
def test_flat_index_round_trip(n, c, h, w, data):
    shape = Shape(n, c, h, w)
    i = data.draw(st.integers(0, shape.size - 1))
    assert shape.flat_index(*shape.unravel(i)) == i
    assert np.ravel_multi_index(shape.unravel(i), tuple(shape)) == i


def test_exhaustive_round_trip_small():
    shape = Shape(2, 3, 4, 5)
    assert [shape.flat_index(*shape.unravel(i)) for i in range(shape.size)] == list(range(shape.size))


def test_shape_and_finiteness_validation():
    with pytest.raises(ValueError):
        Shape(1, 0, 2, 2).validated()
    with pytest.raises(ValueError):
        as_tensor(np.zeros((2, 2)))
    bad = np.zeros((1, 1, 2, 2))
    bad[0, 0, 1, 0] = np.nan
    with pytest.raises(NonFiniteError, match=r"\(0, 0, 1, 0\)"):
        as_tensor(bad)
    assert as_tensor(np.ones((1, 1, 2, 2))).dtype == np.float32
