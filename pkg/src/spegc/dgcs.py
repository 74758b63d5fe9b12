"""Differentiable graph clustering: density-gated affinities refined by entropic OT.

The refined matrix comes from a soft k-edge selection: every flattened edge
is transported to one of two bins (reject, select) with the select bin
holding mass ``k``. The plan is found with log-domain Sinkhorn iterations
that are recorded on the tape, so gradients follow the executed unroll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .rng import Rng
from .tape import Value

COST_MODES = ("linear", "squared")
RANGE_EPS = 1e-12


@dataclass
class SimilarityParams:
    W_q: Value
    W_k: Value

    @classmethod
    def init(cls, h: int, rng: Rng, std: float | None = None) -> "SimilarityParams":
        """Identity projections plus Gaussian noise (default scale ``1/sqrt(h)``)."""
        std = 1.0 / math.sqrt(h) if std is None else std
        return cls(
            W_q=T.param(np.eye(h) + rng.child("W_q").normal(0.0, std, (h, h)), "W_q"),
            W_k=T.param(np.eye(h) + rng.child("W_k").normal(0.0, std, (h, h)), "W_k"),
        )


def similarity(V: Value, W_q: Value, W_k: Value) -> Value:
    """Scaled bilinear similarity ``(V W_q)(V W_k)^T / sqrt(h)``; no row normalisation."""
    V = T.lift(V)
    h = V.cols
    if W_q.shape != (h, h) or W_k.shape != (h, h):
        raise ValueError(f"projection shapes {W_q.shape}, {W_k.shape} do not match h={h}")
    return T.scale((V @ W_q) @ T.transpose(V @ W_k), 1.0 / math.sqrt(h))


def node_density(S: Value, r: int | None = None) -> Value:
    """Per-node density: sum of the ``r`` largest positive similarities in each row.

    ``r=None`` means the whole row (diagonal included).
    """
    S = T.lift(S)
    n = S.rows
    if r is None:
        r = n
    if not 1 <= r <= n:
        raise ValueError(f"density r={r} outside [1, {n}]")
    pos = T.relu(S)
    if r < n:
        # stable sort -> ties go to the lower column index
        order = np.argsort(-pos.data, axis=1, kind="stable")[:, :r]
        mask = np.zeros(S.shape)
        np.put_along_axis(mask, order, 1.0, axis=1)
        pos = pos * mask
    return T.sum_(pos, axis=1)


def edge_affinity(S: Value, D: Value, tau: float = 1.0) -> Value:
    """Gate positive similarities by ``sigmoid((D_j - D_i) / tau)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    S, D = T.lift(S), T.lift(D)
    if D.shape == (1, S.rows):
        D = T.transpose(D)
    gate = T.sigmoid(T.scale(T.transpose(D) - D, 1.0 / tau))
    return T.relu(S) * gate


def build_cost(d: Value, mode: str = "squared", normalize: bool = False) -> Value:
    """Reject/select cost columns for the flattened affinity vector ``d`` (E x 1).

    linear:  [d_max - d_i,        d_min - d_i]
    squared: [(d_i - d_min)^2,    (d_i - d_max)^2]

    With ``normalize`` the vector is first mapped to ``(d - d_min) / (d_max - d_min)``
    so the costs live on a unit scale whatever the affinity magnitude; a
    constant vector maps to zeros.
    """
    d = T.lift(d)
    if d.cols != 1:
        d = T.reshape(d, d.data.size, 1)
    if d.rows < 2:
        raise ValueError("cost construction needs at least 2 edges")
    if mode not in COST_MODES:
        raise ValueError(f"unknown cost mode {mode!r}")
    d_max, d_min = T.max_(d), T.min_(d)
    if normalize:
        spread = d_max.item() - d_min.item()
        if spread < RANGE_EPS:
            d = Value(np.zeros(d.shape))
        else:
            d = (d - d_min) / (d_max - d_min)
        d_max, d_min = T.max_(d), T.min_(d)
    if mode == "linear":
        reject, select = d_max - d, d_min - d
    else:
        reject, select = T.square(d - d_min), T.square(d - d_max)
    return _hstack2(reject, select)


def _hstack2(a: Value, b: Value) -> Value:
    return T.transpose(T.concat_rows([T.transpose(a), T.transpose(b)]))


def edge_budget(n_nodes: int, n_clusters: int) -> tuple[int, bool]:
    """``k = n_nodes - n_clusters`` clamped into ``[1, E - 1]``; flag set when clamped."""
    E = n_nodes * n_nodes
    k = n_nodes - n_clusters
    clamped = min(max(k, 1), E - 1)
    return clamped, clamped != k


@dataclass
class SparsifyProblem:
    d: Value
    k: int
    theta: float = 0.05
    cost_mode: str = "squared"
    max_iter: int = 200
    tol: float = 1e-6
    normalize: bool = False

    def __post_init__(self):
        self.d = T.lift(self.d)
        if self.d.cols != 1:
            self.d = T.reshape(self.d, self.d.data.size, 1)
        E = self.d.rows
        if not 0 < self.k < E:
            raise ValueError(f"k={self.k} must satisfy 0 < k < E={E}")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")

    @property
    def E(self) -> int:
        return self.d.rows

    @property
    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return np.ones(self.E), np.array([self.E - self.k, self.k], dtype=np.float64)

    def cost(self) -> Value:
        return build_cost(self.d, self.cost_mode, self.normalize)


@dataclass
class TransportPlan:
    gamma: Value
    iterations: int
    residual: float
    converged: bool
    k: int

    @property
    def select(self) -> Value:
        return self.gamma[:, 1:2]

    def select_numpy(self) -> np.ndarray:
        return self.gamma.data[:, 1].copy()

    def column_sums(self) -> np.ndarray:
        return self.gamma.data.sum(axis=0)

    def row_sums(self) -> np.ndarray:
        return self.gamma.data.sum(axis=1)


def _check_problem(cost: Value, k: int, theta: float, max_iter: int) -> int:
    E = cost.rows
    if cost.cols != 2:
        raise ValueError("cost must be E x 2")
    if not 0 < k < E:
        raise ValueError(f"k={k} must satisfy 0 < k < E={E}")
    if theta <= 0:
        raise ValueError("theta must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    return E


def _lse(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _sinkhorn_unrolled(log_K: Value, log_c: np.ndarray, max_iter: int, tol: float):
    """Unrolled two-bin Sinkhorn as one tape primitive.

    The forward pass keeps every row potential ``f_t`` and column potential
    ``g_t``; the backward pass walks the executed iterations in reverse, so
    the gradient is exactly that of the unrolled computation.
    """
    L = log_K.data
    L1, L2 = np.ascontiguousarray(L[:, 0]), np.ascontiguousarray(L[:, 1])
    fs: list[np.ndarray] = []
    gs: list[np.ndarray] = [np.zeros(2)]
    lse_rows = np.logaddexp(L1, L2)
    residual = math.inf
    it = 0
    while it < max_iter:
        it += 1
        f = -lse_rows
        g = np.array([log_c[0] - _lse(L1 + f), log_c[1] - _lse(L2 + f)])
        fs.append(f)
        gs.append(g)
        # row sums of the current plan are exp(f + lse_rows'); lse_rows' seeds the next row step
        lse_rows = np.logaddexp(L1 + g[0], L2 + g[1])
        residual = float(np.abs(np.expm1(f + lse_rows)).sum())
        if not math.isfinite(residual):
            raise T.NonFiniteError("sinkhorn", f"residual at iteration {it}")
        if residual <= tol:
            break
    f_T, g_T = fs[-1], gs[-1]
    gamma = np.exp(L + f_T[:, None] + g_T[None, :])

    def back(G):
        W = G * gamma
        L_bar = W.copy()
        f_bar = W.sum(axis=1)
        g_bar = W.sum(axis=0)
        for t in range(len(fs) - 1, -1, -1):
            f_t, g_t, g_prev = fs[t], gs[t + 1], gs[t]
            # g_t = log c - LSE_i(L + f_t): weights Q = softmax over edges per column
            Q = np.exp(L + f_t[:, None] + (g_t - log_c)[None, :])
            QG = Q * g_bar[None, :]
            L_bar -= QG
            f_bar = f_bar - QG.sum(axis=1)
            # f_t = -LSE_j(L + g_prev): weights R = softmax over the two bins per edge
            R = np.exp(L + g_prev[None, :] + f_t[:, None])
            RF = R * f_bar[:, None]
            L_bar -= RF
            g_bar = -RF.sum(axis=0)
            f_bar = np.zeros_like(f_bar)
        return (L_bar,)

    out = Value._result(gamma, "sinkhorn", (log_K,), back)
    return out, it, residual


def _sinkhorn_generic(log_K: Value, log_c: np.ndarray, max_iter: int, tol: float):
    """The same iterations composed from generic tape operations (reference route)."""
    log_c_v = Value(log_c.reshape(1, 2))
    g = Value(np.zeros((1, 2)))
    lse_rows = T.logsumexp_plus(log_K, g, axis=1)
    residual = math.inf
    it = 0
    while it < max_iter:
        it += 1
        f = -lse_rows  # log r = 0
        g = log_c_v - T.logsumexp_plus(log_K, f, axis=0)
        lse_rows = T.logsumexp_plus(log_K, g, axis=1)
        residual = float(np.abs(np.expm1(f.data + lse_rows.data)).sum())
        if not math.isfinite(residual):
            raise T.NonFiniteError("sinkhorn", f"residual at iteration {it}")
        if residual <= tol:
            break
    return T.exp(log_K + f + g), it, residual


def sinkhorn(cost: Value, k: int, theta: float, max_iter: int = 200,
             tol: float = 1e-6, fused: bool = True) -> TransportPlan:
    """Log-domain Sinkhorn for rows summing to 1 and columns to ``[E - k, k]``.

    Starts from ``exp(-cost / theta)``; each iteration rescales rows then
    columns. Stops once the L1 row-marginal residual (measured after the
    column step) is at most ``tol``, or after ``max_iter`` iterations. A
    negative ``tol`` runs exactly ``max_iter`` iterations.
    """
    cost = T.lift(cost)
    E = _check_problem(cost, k, theta, max_iter)
    log_K = T.scale(cost, -1.0 / theta)
    log_c = np.log(np.array([E - k, k], dtype=np.float64))
    run = _sinkhorn_unrolled if fused else _sinkhorn_generic
    gamma, it, residual = run(log_K, log_c, max_iter, tol)
    return TransportPlan(gamma=gamma, iterations=it, residual=residual,
                         converged=residual <= tol, k=k)


def sinkhorn_solve(problem: SparsifyProblem, fused: bool = True) -> TransportPlan:
    return sinkhorn(problem.cost(), problem.k, problem.theta,
                    max_iter=problem.max_iter, tol=problem.tol, fused=fused)


def refine(plan: TransportPlan, n_nodes: int) -> Value:
    """Row-major reshape of the select column into an ``n_nodes x n_nodes`` matrix."""
    if plan.gamma.rows != n_nodes * n_nodes:
        raise ValueError(f"plan has {plan.gamma.rows} edges, expected {n_nodes ** 2}")
    return T.reshape(plan.select, n_nodes, n_nodes)


def topk_oracle(d, k: int) -> np.ndarray:
    """Binary vector marking the ``k`` largest entries of ``d`` (ties -> lower index)."""
    d = np.asarray(d, dtype=np.float64).ravel()
    if not 0 < k < d.size:
        raise ValueError(f"k={k} must satisfy 0 < k < E={d.size}")
    order = np.argsort(-d, kind="stable")
    y = np.zeros(d.size)
    y[order[:k]] = 1.0
    return y


@dataclass
class ClusterResult:
    """Everything produced between enhanced node features and the refined matrix."""

    S: Value
    density: Value
    S_prime: Value
    plan: TransportPlan
    S_star: Value
    k: int
    k_clamped: bool


def refine_affinity(S_prime: Value, n_clusters: int, theta: float = 0.05,
                    cost_mode: str = "squared", max_iter: int = 200,
                    tol: float = 1e-6, zero_diagonal: bool = False,
                    normalize: bool = False) -> tuple[Value, TransportPlan, bool]:
    """Solve the k-edge sparsification of a square affinity; returns ``(S*, plan, k_clamped)``."""
    S_prime = T.lift(S_prime)
    n = S_prime.rows
    if S_prime.cols != n:
        raise ValueError(f"affinity must be square, got {S_prime.shape}")
    if zero_diagonal:
        S_prime = S_prime * (1.0 - np.eye(n))
    k, clamped = edge_budget(n, n_clusters)
    d = T.reshape(S_prime, n * n, 1)
    problem = SparsifyProblem(d=d, k=k, theta=theta, cost_mode=cost_mode,
                              max_iter=max_iter, tol=tol, normalize=normalize)
    plan = sinkhorn_solve(problem)
    return refine(plan, n), plan, clamped


def cluster(V: Value, params: SimilarityParams, n_clusters: int, *, tau: float = 1.0,
            density_r: int | None = None, theta: float = 0.05, cost_mode: str = "squared",
            max_iter: int = 200, tol: float = 1e-6, zero_diagonal: bool = False,
            normalize: bool = False) -> ClusterResult:
    """Full solver pass from pseudo-batch features to the refined matrix ``S*``."""
    S = similarity(V, params.W_q, params.W_k)
    D = node_density(S, density_r)
    S_prime = edge_affinity(S, D, tau)
    S_star, plan, clamped = refine_affinity(S_prime, n_clusters, theta, cost_mode,
                                            max_iter, tol, zero_diagonal, normalize)
    return ClusterResult(S=S, density=D, S_prime=S_prime, plan=plan, S_star=S_star,
                         k=plan.k, k_clamped=clamped)
