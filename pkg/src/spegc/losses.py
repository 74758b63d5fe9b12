"""Graph consistency, commonality clustering, and total adaptation losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tape as T
from .tape import Value

PROB_FLOOR = 1e-8


@dataclass
class LossReport:
    L: float
    L_G: float
    L_C: float
    lam: float

    def to_dict(self) -> dict:
        return asdict(self)


def graph_consistency_loss(S_star, P, P_ref=None) -> Value:
    """``sum_ij S*_ij KL(P_j || sg(P_i))``.

    ``P_ref`` supplies the rows behind the stop-gradient (defaults to ``P``);
    gradients reach ``P`` only through the ``P_j`` arguments and reach
    ``S_star`` directly.
    """
    S_star, P = T.lift(S_star), T.lift(P)
    ref = P if P_ref is None else T.lift(P_ref)
    n = P.rows
    if S_star.shape != (n, n) or ref.shape != P.shape:
        raise ValueError(f"shape mismatch: S* {S_star.shape}, P {P.shape}, ref {ref.shape}")
    log_q = T.log(T.clamp_min(T.stop_gradient(ref), PROB_FLOOR))
    neg_entropy = T.sum_(P * T.log(T.clamp_min(P, PROB_FLOOR)), axis=1)  # n x 1, indexed by j
    # kl[i, j] = sum_c P_jc log P_jc - sum_c P_jc log Q_ic
    kl = T.transpose(neg_entropy) - log_q @ T.transpose(P)
    return T.sum_(S_star * kl)


def clustering_loss(p_co) -> Value:
    """``(1/B) * sum over ordered pairs i != j of (1 - cos(p_i, p_j))``.

    Self-pairs contribute 0 whatever the vector; pairs involving a zero
    vector have cosine 0 and so contribute 1.
    """
    p_co = T.lift(p_co)
    B = p_co.rows
    if B < 2:
        return Value(np.zeros((1, 1)))
    off = 1.0 - np.eye(B)
    terms = (1.0 - T.cosine_rows(p_co, p_co)) * off
    return T.scale(T.sum_(terms), 1.0 / B)


def total_loss(L_G: Value, L_C: Value, lam: float) -> Value:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return T.lift(L_G) + T.scale(T.lift(L_C), lam)
