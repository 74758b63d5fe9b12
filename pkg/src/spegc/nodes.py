"""MC-dropout uncertainty, low-uncertainty node sampling, projection, and the feature queue."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tape as T
from .rng import Rng
from .tape import Value


@dataclass
class UncertaintyMap:
    values: np.ndarray  # H x W, >= 0
    t: int


def estimate_uncertainty(feature_maps) -> UncertaintyMap:
    """Mean squared deviation of each pixel's feature vector from its mean over passes.

    ``feature_maps`` is a sequence (or array) of ``t`` maps shaped ``H x W x C``.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in feature_maps]
    t = len(maps)
    if t < 2:
        raise ValueError(f"need at least 2 stochastic passes, got {t}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("feature maps differ in shape")
    # offsets from the first pass keep identical passes exactly zero
    stack = np.stack(maps)
    stack = stack - stack[0]
    dev = stack - stack.mean(axis=0)
    return UncertaintyMap(values=(dev * dev).sum(axis=-1).mean(axis=0), t=t)


def _morton(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    code = np.zeros(rows.shape, dtype=np.int64)
    for bit in range(16):
        code |= ((cols >> bit) & 1) << (2 * bit)
        code |= ((rows >> bit) & 1) << (2 * bit + 1)
    return code


@dataclass
class NodeSelection:
    coords: np.ndarray  # n x 2 (row, col), row-major order
    fallback: bool  # no foreground pixel: globally lowest-uncertainty pixels used
    candidates: int  # size of the kept low-uncertainty set
    threshold: float  # largest uncertainty admitted into the kept set


def select_nodes(U: UncertaintyMap | np.ndarray, prediction: np.ndarray, p: float,
                 n_target: int, rng: Rng) -> NodeSelection:
    """Pick up to ``n_target`` spatially spread pixels from the stable foreground.

    Foreground pixels are those whose arg-max class is not background. The
    ``ceil(p * count)`` least uncertain ones are kept (ties -> row-major
    order); the kept set is ordered along a Z-order curve, cut into
    ``n_target`` contiguous strata, and one pixel is drawn from each stratum.
    """
    values = U.values if isinstance(U, UncertaintyMap) else np.asarray(U, dtype=np.float64)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"sampling rate p={p} outside (0, 1]")
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    pred = np.asarray(prediction)
    labels = pred.argmax(axis=-1) if pred.ndim == 3 else pred
    if labels.shape != values.shape:
        raise ValueError(f"prediction {labels.shape} and uncertainty {values.shape} differ")
    flat_u = values.ravel()
    fg = np.flatnonzero(labels.ravel() != 0)
    fallback = fg.size == 0
    pool = np.arange(flat_u.size) if fallback else fg
    n_keep = math.ceil(p * pool.size)
    kept = pool[np.argsort(flat_u[pool], kind="stable")[:n_keep]]
    threshold = float(flat_u[kept].max())
    if n_target >= kept.size:
        chosen = np.sort(kept)
    else:
        W = values.shape[1]
        rows, cols = kept // W, kept % W
        ordered = kept[np.argsort(_morton(rows, cols), kind="stable")]
        edges = np.linspace(0, ordered.size, n_target + 1).round().astype(int)
        draws = rng.random(n_target)
        picks = [ordered[lo + int(u * (hi - lo))] for u, lo, hi in zip(draws, edges[:-1], edges[1:])]
        chosen = np.sort(np.asarray(picks, dtype=np.int64))
    W = values.shape[1]
    coords = np.stack([chosen // W, chosen % W], axis=1)
    return NodeSelection(coords=coords, fallback=fallback, candidates=int(kept.size),
                         threshold=threshold)


@dataclass
class Projection:
    """Two-layer map from backbone features into the graph space."""

    w1: Value
    b1: Value
    w2: Value
    b2: Value

    @classmethod
    def init(cls, in_dim: int, h: int, rng: Rng) -> "Projection":
        return cls(
            w1=T.param(rng.child("proj_w1").normal(0.0, math.sqrt(2.0 / in_dim), (in_dim, h)), "proj_w1"),
            b1=T.param(np.zeros((1, h)), "proj_b1"),
            w2=T.param(rng.child("proj_w2").normal(0.0, math.sqrt(1.0 / h), (h, h)), "proj_w2"),
            b2=T.param(np.zeros((1, h)), "proj_b2"),
        )

    def params(self) -> dict[str, Value]:
        return {"proj_w1": self.w1, "proj_b1": self.b1, "proj_w2": self.w2, "proj_b2": self.b2}

    def __call__(self, feats) -> Value:
        feats = T.lift(feats)
        if feats.cols != self.w1.rows:
            raise ValueError(f"projection expects {self.w1.rows} input features, got {feats.cols}")
        return T.relu(feats @ self.w1 + self.b1) @ self.w2 + self.b2


def project_nodes(feats, projection: Projection) -> Value:
    return projection(feats)


@dataclass
class NodeBlock:
    """One image's contribution to a pseudo-batch."""

    enhanced: Value  # n x h enhanced node features
    features: Value  # n x h_f backbone features at the nodes
    query: Value  # 1 x h pooled query
    image_id: int = -1

    @property
    def n(self) -> int:
        return self.enhanced.rows

    def detached(self) -> "NodeBlock":
        return NodeBlock(Value(self.enhanced.data), Value(self.features.data),
                         Value(self.query.data), self.image_id)


@dataclass
class PseudoBatch:
    blocks: list[NodeBlock]

    @property
    def B(self) -> int:
        return len(self.blocks)

    @property
    def V(self) -> int:
        return sum(b.n for b in self.blocks)

    @property
    def sizes(self) -> list[int]:
        return [b.n for b in self.blocks]

    def enhanced(self) -> Value:
        return T.concat_rows([b.enhanced for b in self.blocks])

    def features(self) -> Value:
        return T.concat_rows([b.features for b in self.blocks])

    def queries(self) -> list[Value]:
        return [b.query for b in self.blocks]


@dataclass
class FeatureQueue:
    """FIFO of detached node blocks from the most recent images."""

    capacity: int = 3
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("queue capacity must be >= 0")

    def __len__(self) -> int:
        return len(self.entries)

    def assemble_and_rotate(self, current: NodeBlock) -> PseudoBatch:
        """Queued blocks followed by ``current``; then enqueue ``current`` detached."""
        batch = PseudoBatch(blocks=[*self.entries, current])
        self.entries.append(current.detached())
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        return batch

    def snapshot(self) -> list[NodeBlock]:
        return list(self.entries)

    def restore(self, blocks: Sequence[NodeBlock]) -> None:
        self.entries = deque(blocks)
