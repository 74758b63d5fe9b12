import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spegc import tape as T
from spegc.losses import clustering_loss, graph_consistency_loss, total_loss
from spegc.numerics import cosine
from spegc.rng import Rng


def _kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def test_graph_loss_hand_value():
    S = np.array([[0.0, 0.5], [0.0, 0.0]])
    P = np.array([[0.5, 0.5], [0.9, 0.1]])
    L = graph_consistency_loss(S, P).item()
    assert L == pytest.approx(0.5 * (0.9 * math.log(1.8) + 0.1 * math.log(0.2)), abs=1e-12)
    assert L == pytest.approx(0.18403, abs=1e-4)


def test_graph_loss_matches_double_loop():
    rng = Rng(2)
    S = rng.uniform(size=(4, 4))
    P = np.apply_along_axis(lambda r: r / r.sum(), 1, rng.uniform(0.1, 1, size=(4, 3)))
    expected = sum(S[i, j] * _kl(P[j], P[i]) for i in range(4) for j in range(4))
    assert graph_consistency_loss(S, P).item() == pytest.approx(expected, abs=1e-12)


def test_graph_loss_zero_cases():
    P = Rng(0).uniform(0.1, 1, (3, 3))
    P /= P.sum(axis=1, keepdims=True)
    assert graph_consistency_loss(np.zeros((3, 3)), P).item() == 0.0
    same = np.tile(P[:1], (3, 1))
    assert graph_consistency_loss(np.ones((3, 3)), same).item() == pytest.approx(0.0, abs=1e-14)


def test_graph_loss_barrier_blocks_reference_side():
    rng = Rng(5)
    S = T.param(rng.child("s").uniform(size=(3, 3)), "S")
    P = T.param(np.apply_along_axis(lambda r: r / r.sum(), 1, rng.uniform(0.1, 1, (3, 3))), "P")
    ref = T.param(P.data.copy(), "ref")
    g = T.backward(graph_consistency_loss(S, P, ref), {"S": S, "P": P, "ref": ref})
    assert not np.any(g["ref"])
    assert np.any(g["P"]) and np.any(g["S"])
    leaves = {"S": S, "P": P}
    numeric = T.fd_oracle(lambda: graph_consistency_loss(S, P), leaves)
    analytic = T.backward(graph_consistency_loss(S, P), leaves)
    for k in leaves:
        assert T.max_relative_error(analytic[k], numeric[k]) <= 1e-6


def test_graph_loss_shape_errors():
    with pytest.raises(ValueError):
        graph_consistency_loss(np.zeros((2, 3)), np.full((2, 2), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_graph_loss_non_negative(seed):
    rng = Rng(seed)
    S = rng.uniform(size=(5, 5))
    P = rng.uniform(0.01, 1, (5, 3))
    P /= P.sum(axis=1, keepdims=True)
    assert graph_consistency_loss(S, P).item() >= -1e-12


def test_clustering_loss_orthogonal_pair():
    assert clustering_loss(np.array([[1.0, 0.0], [0.0, 1.0]])).item() == pytest.approx(1.0, abs=1e-12)


def test_clustering_loss_matches_ordered_pairs():
    p = Rng(1).normal(size=(4, 3))
    expected = sum(1 - cosine(p[i], p[j]) for i in range(4) for j in range(4) if i != j) / 4
    assert clustering_loss(p).item() == pytest.approx(expected, abs=1e-12)


def test_clustering_loss_degenerate_cases():
    assert clustering_loss(np.ones((1, 3))).item() == 0.0
    assert clustering_loss(np.tile([[1.0, 2.0]], (3, 1))).item() == pytest.approx(0.0, abs=1e-12)
    # a zero prompt has cosine 0 with everything, so each pair touching it costs 1
    assert clustering_loss(np.array([[0.0, 0.0], [1.0, 0.0]])).item() == pytest.approx(1.0)


def test_total_loss_arithmetic():
    L = total_loss(T.lift(0.18403), T.lift(1.0), 0.2).item()
    assert L == pytest.approx(0.38403, abs=1e-12)
    with pytest.raises(ValueError):
        total_loss(T.lift(0.0), T.lift(0.0), -1.0)
