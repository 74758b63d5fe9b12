"""Plain (untaped) numeric helpers shared across the pipeline."""

from __future__ import annotations

import numpy as np

COSINE_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(op, f"{bad} of {np.size(x)} entries")
    return x


def softmax_stable(x) -> np.ndarray:
    """Softmax of a 1-D vector computed with max-subtraction."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax_stable expects a non-empty 1-D vector")
    check_finite(x, "softmax_stable")
    z = np.exp(x - x.max())
    return z / z.sum()


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has norm below ``COSINE_EPS``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` (m x h) and rows of ``b`` (n x h)."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    safe_a = np.where(na < COSINE_EPS, 1.0, na)
    safe_b = np.where(nb < COSINE_EPS, 1.0, nb)
    out = (a @ b.T) / np.outer(safe_a, safe_b)
    out[na < COSINE_EPS, :] = 0.0
    out[:, nb < COSINE_EPS] = 0.0
    return out
