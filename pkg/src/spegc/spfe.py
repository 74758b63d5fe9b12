"""Prompt-based enhancement of node features.

A learnable context vector pools the nodes into one query. The query reads
two prompt pools: the commonality pool through reverse attention (ReLU of
negated cosine, unnormalised) and the heterogeneity pool through softmax
attention over cosines. Both retrieved prompts are added to every node.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tape as T
from .rng import Rng
from .tape import Value

CO, HE = "CO", "HE"


@dataclass
class PromptPool:
    kind: str
    prompts: Value  # M x h

    @classmethod
    def init(cls, kind: str, M: int, h: int, rng: Rng, scale: float = 0.5) -> "PromptPool":
        if kind not in (CO, HE):
            raise ValueError(f"unknown pool kind {kind!r}")
        if M < 1:
            raise ValueError("a prompt pool needs at least one prompt")
        data = rng.child("prompts", 0 if kind == CO else 1).uniform(-scale, scale, (M, h))
        return cls(kind, T.param(data, f"P_{kind}"))

    @property
    def M(self) -> int:
        return self.prompts.rows


@dataclass
class RetrievalResult:
    query: Value
    alpha_co: Value  # 1 x M, >= 0, unnormalised
    alpha_he: Value  # 1 x M, sums to 1
    p_co: Value  # 1 x h
    p_he: Value  # 1 x h


def attention_pool(V, c_p: Value) -> Value:
    """``V^T softmax(V c_p)`` as a ``1 x h`` row."""
    V = T.lift(V)
    if V.rows < 1:
        raise ValueError("cannot pool an empty node set")
    c_p = T.lift(c_p)
    if c_p.shape == (1, V.cols):
        c_p = T.transpose(c_p)
    weights = T.softmax(V @ c_p, axis=0)  # n x 1
    return T.transpose(weights) @ V


def _check_pool(q: Value, P: Value) -> None:
    if q.cols != P.cols:
        raise ValueError(f"query dim {q.cols} does not match prompt dim {P.cols}")


def retrieve_commonality(q, P: Value) -> tuple[Value, Value]:
    q, P = T.lift(q), T.lift(P)
    _check_pool(q, P)
    alpha = T.relu(-T.cosine_rows(q, P))
    return alpha, alpha @ P


def retrieve_heterogeneity(q, P: Value) -> tuple[Value, Value]:
    q, P = T.lift(q), T.lift(P)
    _check_pool(q, P)
    alpha = T.softmax(T.cosine_rows(q, P), axis=1)
    return alpha, alpha @ P


def enhance(V, p_co, p_he) -> Value:
    V, p_co, p_he = T.lift(V), T.lift(p_co), T.lift(p_he)
    if not (p_co.shape == p_he.shape == (1, V.cols)):
        raise ValueError("prompt vectors must be 1 x h matching the node features")
    return V + (p_co + p_he)


def enhance_nodes(V, c_p: Value, pool_co: PromptPool, pool_he: PromptPool
                  ) -> tuple[Value, RetrievalResult]:
    q = attention_pool(V, c_p)
    a_co, p_co = retrieve_commonality(q, pool_co.prompts)
    a_he, p_he = retrieve_heterogeneity(q, pool_he.prompts)
    return enhance(V, p_co, p_he), RetrievalResult(q, a_co, a_he, p_co, p_he)


def init_context(h: int, rng: Rng, scale: float = 0.1) -> Value:
    return T.param(rng.child("c_p").uniform(-scale, scale, (1, h)), "c_p")


def commonality_prompts(queries, pool_co: PromptPool) -> Value:
    """Stack ``p_CO`` for each query row against the current commonality pool (B x h)."""
    rows = [retrieve_commonality(q, pool_co.prompts)[1] for q in queries]
    return T.concat_rows(rows)
