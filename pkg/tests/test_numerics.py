import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spegc.numerics import NonFiniteError, cosine, cosine_matrix, softmax_stable
from spegc.rng import Rng

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_stable([0, 0, 0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_two_entries_hand_value():
    e = math.e
    out = softmax_stable([1.0, 0.0])
    np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(out, [0.73106, 0.26894], atol=1e-5)


def test_softmax_large_logits_do_not_overflow():
    out = softmax_stable([1000.0, 0.0])
    assert out[0] == pytest.approx(1.0)
    assert 0.0 <= out[1] < 1e-300 or out[1] == 0.0


@pytest.mark.parametrize("bad", [[], [1.0, np.nan], [np.inf, 0.0]])
def test_softmax_rejects_bad_input(bad):
    with pytest.raises((ValueError, NonFiniteError)):
        softmax_stable(bad)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(x):
    out = softmax_stable(x)
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out >= 0)


@given(arrays(np.float64, 5, elements=finite), finite)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax_stable(x), softmax_stable(x + c), atol=1e-12)


@pytest.mark.parametrize("a,b,expected", [
    ([1, 0], [1, 0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 0], [-1, 0], -1.0),
])
def test_cosine_examples(a, b, expected):
    assert cosine(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_convention():
    assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine([1e-14, 0.0], [1.0, 0.0]) == 0.0


def test_cosine_length_mismatch():
    with pytest.raises(ValueError):
        cosine([1, 2], [1, 2, 3])


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_cosine_bounded_and_symmetric(a, b):
    c = cosine(a, b)
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
    assert c == pytest.approx(cosine(b, a), abs=1e-12)


def test_cosine_matrix_matches_pairwise():
    rng = Rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    m = cosine_matrix(a, b)
    for i in range(4):
        for j in range(5):
            assert m[i, j] == pytest.approx(cosine(a[i], b[j]), abs=1e-12)


def test_rng_reproducible_and_purpose_separated():
    a = Rng(7).child("dropout", 3).normal(size=10)
    b = Rng(7).child("dropout", 3).normal(size=10)
    c = Rng(7).child("dropout", 4).normal(size=10)
    d = Rng(7).child("init", 3).normal(size=10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_child_independent_of_call_order():
    root = Rng(11)
    first = root.child("x").uniform(size=3)
    root.child("y").uniform(size=100)
    again = root.child("x").uniform(size=3)
    assert np.array_equal(first, again)
