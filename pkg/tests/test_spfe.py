import numpy as np
import pytest

from spegc import tape as T
from spegc.numerics import cosine
from spegc.rng import Rng
from spegc.spfe import (CO, HE, PromptPool, attention_pool, commonality_prompts, enhance,
                        enhance_nodes, init_context, retrieve_commonality,
                        retrieve_heterogeneity)


def test_pool_hand_value():
    q = attention_pool(np.eye(2), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(q.data, [[0.73106, 0.26894]], atol=1e-5)


def test_pool_single_row_and_zero_context():
    V = Rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(attention_pool(V[:1], np.ones((1, 3))).data, V[:1], atol=1e-15)
    np.testing.assert_allclose(attention_pool(V, np.zeros((1, 3))).data, V.mean(axis=0, keepdims=True))
    with pytest.raises(ValueError):
        attention_pool(np.zeros((0, 3)), np.zeros((1, 3)))


def test_commonality_hand_value():
    a, p = retrieve_commonality(np.array([[1.0, 0.0]]), T.lift(np.array([[-1.0, 0.0], [0.0, 1.0]])))
    np.testing.assert_allclose(a.data, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(p.data, [[-1.0, 0.0]], atol=1e-12)


def test_commonality_zero_when_all_aligned_and_scale_invariant():
    P = T.lift(np.array([[1.0, 0.2], [0.5, 0.5]]))
    a, p = retrieve_commonality(np.array([[1.0, 0.1]]), P)
    assert not np.any(a.data) and not np.any(p.data)
    q = Rng(2).normal(size=(1, 4))
    P = T.lift(Rng(3).normal(size=(6, 4)))
    a1, p1 = retrieve_commonality(q, P)
    a5, p5 = retrieve_commonality(5 * q, P)
    np.testing.assert_allclose(a1.data, a5.data, atol=1e-12)
    np.testing.assert_allclose(p1.data, p5.data, atol=1e-12)
    for j in range(6):
        assert a1.data[0, j] == pytest.approx(max(0.0, -cosine(q[0], P.data[j])), abs=1e-12)


def test_heterogeneity_hand_value():
    a, p = retrieve_heterogeneity(np.array([[1.0, 0.0]]), T.lift(np.array([[1.0, 0.0], [-1.0, 0.0]])))
    np.testing.assert_allclose(a.data, [[0.88080, 0.11920]], atol=1e-5)
    np.testing.assert_allclose(p.data, [[0.76159, 0.0]], atol=1e-5)


def test_heterogeneity_single_prompt_and_permutation():
    P1 = T.lift(np.array([[0.3, -0.7]]))
    a, p = retrieve_heterogeneity(np.array([[1.0, 2.0]]), P1)
    assert a.data[0, 0] == 1.0
    np.testing.assert_allclose(p.data, P1.data)
    q = Rng(4).normal(size=(1, 3))
    P = Rng(5).normal(size=(5, 3))
    perm = [3, 0, 4, 1, 2]
    a, p = retrieve_heterogeneity(q, T.lift(P))
    ap, pp = retrieve_heterogeneity(q, T.lift(P[perm]))
    np.testing.assert_allclose(ap.data[0], a.data[0, perm], atol=1e-14)
    np.testing.assert_allclose(pp.data, p.data, atol=1e-14)
    assert a.data.sum() == pytest.approx(1.0)


def test_retrieval_dimension_mismatch():
    with pytest.raises(ValueError):
        retrieve_commonality(np.zeros((1, 2)), T.lift(np.zeros((3, 4))))
    with pytest.raises(ValueError):
        retrieve_heterogeneity(np.zeros((1, 2)), T.lift(np.zeros((3, 4))))


def test_enhance_examples():
    out = enhance(np.array([[1.0, 1.0]]), np.array([[-1.0, 0.0]]), np.array([[0.5, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 1.0]])
    V = Rng(0).normal(size=(7, 3))
    z = np.zeros((1, 3))
    np.testing.assert_array_equal(enhance(V, z, z).data, V)
    with pytest.raises(ValueError):
        enhance(V, np.zeros((1, 2)), z)


def test_enhance_nodes_and_gradients_reach_all_leaves():
    rng = Rng(6)
    V = T.param(rng.child("v").normal(size=(5, 4)), "V")
    c_p = init_context(4, rng)
    co = PromptPool.init(CO, 3, 4, rng)
    he = PromptPool.init(HE, 3, 4, rng)
    # make at least one commonality prompt oppose the query so alpha_co is live
    q = attention_pool(V, c_p).data
    co.prompts.data[0] = -q[0]
    leaves = {"V": V, "c_p": c_p, "P_CO": co.prompts, "P_HE": he.prompts}

    def f():
        out, _ = enhance_nodes(V, c_p, co, he)
        return T.sum_(T.square(out))

    analytic = T.backward(f(), leaves)
    numeric = T.fd_oracle(f, leaves)
    for k in leaves:
        assert np.any(analytic[k])
        assert T.max_relative_error(analytic[k], numeric[k]) <= 1e-5


def test_commonality_prompts_stacks_rows():
    pool = PromptPool(CO, T.lift(np.array([[-1.0, 0.0], [0.0, -1.0]])))
    out = commonality_prompts([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])], pool)
    np.testing.assert_allclose(out.data, [[-1.0, 0.0], [0.0, -1.0]], atol=1e-12)


def test_pool_init_errors():
    with pytest.raises(ValueError):
        PromptPool.init("XX", 2, 2, Rng(0))
    with pytest.raises(ValueError):
        PromptPool.init(CO, 0, 2, Rng(0))
