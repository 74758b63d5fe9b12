import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spegc import tape as T
from spegc.nodes import (FeatureQueue, NodeBlock, Projection, estimate_uncertainty,
                         select_nodes)
from spegc.rng import Rng
from spegc.tape import Value


def _block(n, tag):
    return NodeBlock(Value(np.full((n, 2), float(tag))), Value(np.zeros((n, 3))),
                     Value(np.zeros((1, 2))), image_id=tag)


def test_uncertainty_two_passes_hand_value():
    a = np.array([[[1.0, 0.0]]])
    b = np.array([[[3.0, 0.0]]])
    U = estimate_uncertainty([a, b])
    assert U.values[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_uncertainty_identical_passes_and_scaling():
    f = Rng(0).normal(size=(4, 5, 3))
    assert not np.any(estimate_uncertainty([f, f, f]).values)
    maps = [Rng(i).normal(size=(4, 5, 3)) for i in range(4)]
    U = estimate_uncertainty(maps).values
    np.testing.assert_allclose(estimate_uncertainty([2.5 * m for m in maps]).values, 6.25 * U)


def test_uncertainty_errors():
    with pytest.raises(ValueError):
        estimate_uncertainty([np.zeros((2, 2, 1))])
    with pytest.raises(ValueError):
        estimate_uncertainty([np.zeros((2, 2, 1)), np.zeros((2, 3, 1))])


def test_select_lowest_uncertainty_half():
    U = np.array([[0.1, 0.9], [0.2, 0.8]])
    sel = select_nodes(U, np.ones((2, 2), int), 0.5, 2, Rng(0))
    picked = sorted(U[r, c] for r, c in sel.coords)
    assert picked == [0.1, 0.2]
    assert not sel.fallback and sel.candidates == 2


def test_select_ties_prefer_row_major():
    U = np.zeros((3, 3))
    sel = select_nodes(U, np.ones((3, 3), int), 0.2, 5, Rng(0))
    assert [tuple(c) for c in sel.coords] == [(0, 0), (0, 1)]


def test_select_returns_whole_kept_set_when_target_large():
    U = Rng(1).uniform(size=(4, 4))
    sel = select_nodes(U, np.ones((4, 4), int), 0.5, 100, Rng(0))
    assert len(sel.coords) == 8


def test_select_ignores_background_and_falls_back():
    U = np.array([[0.0, 0.5], [0.6, 0.7]])
    labels = np.array([[0, 1], [2, 0]])
    sel = select_nodes(U, labels, 1.0, 4, Rng(0))
    assert {tuple(c) for c in sel.coords} == {(0, 1), (1, 0)}
    fb = select_nodes(U, np.zeros((2, 2), int), 0.5, 4, Rng(0))
    assert fb.fallback and [tuple(c) for c in fb.coords] == [(0, 0), (0, 1)]


def test_select_accepts_probability_maps():
    probs = np.zeros((2, 2, 3))
    probs[..., 1] = 1.0
    sel = select_nodes(np.ones((2, 2)), probs, 1.0, 4, Rng(0))
    assert len(sel.coords) == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.integers(1, 40))
def test_selected_nodes_below_quantile_and_deterministic(seed, p, n_target):
    rng = Rng(seed)
    U = rng.uniform(size=(12, 12))
    labels = (rng.uniform(size=(12, 12)) > 0.4).astype(int)
    a = select_nodes(U, labels, p, n_target, Rng(seed).child("s"))
    b = select_nodes(U, labels, p, n_target, Rng(seed).child("s"))
    assert np.array_equal(a.coords, b.coords)
    assert len(a.coords) == min(n_target, a.candidates)
    assert len({tuple(c) for c in a.coords}) == len(a.coords)
    if not a.fallback:
        assert all(labels[r, c] != 0 for r, c in a.coords)
        assert all(U[r, c] <= a.threshold for r, c in a.coords)


def test_select_spreads_over_image():
    U = np.zeros((32, 32))
    sel = select_nodes(U, np.ones((32, 32), int), 1.0, 4, Rng(0))
    quadrants = {(r // 16, c // 16) for r, c in sel.coords}
    assert len(quadrants) == 4


def test_select_errors():
    with pytest.raises(ValueError):
        select_nodes(np.zeros((2, 2)), np.ones((2, 2), int), 0.0, 1, Rng(0))
    with pytest.raises(ValueError):
        select_nodes(np.zeros((2, 2)), np.ones((2, 2), int), 0.5, 0, Rng(0))
    with pytest.raises(ValueError):
        select_nodes(np.zeros((2, 2)), np.ones((3, 2), int), 0.5, 1, Rng(0))


def test_projection_matches_direct_evaluation():
    proj = Projection.init(5, 4, Rng(3))
    for v in proj.params().values():
        v.data[...] = Rng(7).child(v.name).normal(size=v.shape)
    x = Rng(8).normal(size=(3, 5))
    expected = np.zeros((3, 4))
    for i in range(3):
        hidden = [max(0.0, sum(x[i, a] * proj.w1.data[a, j] for a in range(5)) + proj.b1.data[0, j])
                  for j in range(4)]
        for j in range(4):
            expected[i, j] = sum(hidden[a] * proj.w2.data[a, j] for a in range(4)) + proj.b2.data[0, j]
    np.testing.assert_allclose(proj(x).data, expected, atol=1e-12)


def test_projection_zero_input_and_identity():
    proj = Projection.init(3, 3, Rng(0))
    proj.b2.data[...] = [[1.0, 2.0, 3.0]]
    np.testing.assert_allclose(proj(np.zeros((2, 3))).data, [[1, 2, 3]] * 2)
    proj.w1.data[...] = np.eye(3)
    proj.w2.data[...] = np.eye(3)
    proj.b2.data[...] = 0.0
    x = np.abs(Rng(1).normal(size=(4, 3)))
    np.testing.assert_allclose(proj(x).data, x)
    with pytest.raises(ValueError):
        proj(np.zeros((2, 4)))


def test_queue_fifo_sequence():
    q = FeatureQueue(capacity=3)
    sizes = []
    for tag in range(5):
        batch = q.assemble_and_rotate(_block(2, tag))
        sizes.append(batch.B)
        assert len(q) <= 3
        assert batch.blocks[-1].image_id == tag
    assert sizes[:3] == [1, 2, 3]
    assert sizes[3:] == [4, 4]
    assert [b.image_id for b in q.snapshot()] == [2, 3, 4]


def test_queue_batch_layout_and_detach():
    q = FeatureQueue(capacity=2)
    w = T.param(np.ones((2, 2)), "w")
    cur = NodeBlock(w * 2.0, Value(np.zeros((2, 3))), Value(np.zeros((1, 2))), 0)
    q.assemble_and_rotate(cur)
    batch = q.assemble_and_rotate(_block(3, 1))
    assert batch.V == 5 and batch.sizes == [2, 3]
    assert not batch.blocks[0].enhanced.requires_grad
    assert batch.enhanced().shape == (5, 2)


def test_queue_zero_capacity_and_errors():
    q = FeatureQueue(capacity=0)
    assert q.assemble_and_rotate(_block(1, 0)).B == 1
    assert len(q) == 0
    with pytest.raises(ValueError):
        FeatureQueue(capacity=-1)
