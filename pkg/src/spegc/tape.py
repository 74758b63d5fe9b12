"""Minimal reverse-mode differentiation over dense 2-D float64 matrices.

Every ``Value`` wraps a 2-D ``float64`` array. Operations build a DAG of
``Value`` nodes when at least one input requires a gradient; otherwise they
return plain constants and record nothing, so untaped evaluation costs the
same as numpy. Only the operations this pipeline needs are provided.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .numerics import COSINE_EPS, NonFiniteError, check_finite

Array = np.ndarray


def _as2d(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"Value holds 2-D data, got shape {a.shape}")
    return a


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """A 2-D matrix carrying optional differentiation history."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as2d(data).copy()
        check_finite(self.data, name or "leaf")
        self.requires_grad = requires_grad
        self.parents: tuple[Value, ...] = ()
        self.backward_fn: Callable[[Array], Sequence[Array | None]] | None = None
        self.op = "leaf"
        self.name = name
        self.grad: Array | None = None

    # construction -------------------------------------------------------
    @classmethod
    def _result(cls, data: Array, op: str, parents: Sequence["Value"], backward_fn) -> "Value":
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        out.name = None
        out.grad = None
        live = any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.parents = ()
            out.backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> Array:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op!r}{tag}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Value":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Value":
        return sub(self, other)

    def __rsub__(self, other) -> "Value":
        return sub(lift(other), self)

    def __mul__(self, other) -> "Value":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Value":
        return div(self, other)

    def __neg__(self) -> "Value":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Value":
        return matmul(self, other)

    def __getitem__(self, key) -> "Value":
        return index(self, key)

    @property
    def T(self) -> "Value":
        return transpose(self)


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def param(x, name: str | None = None) -> Value:
    """A learnable leaf."""
    return Value(x, requires_grad=True, name=name)


# elementwise binary ------------------------------------------------------------

def add(a, b) -> Value:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return Value._result(a.data + b.data, "add", (a, b),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return Value._result(a.data - b.data, "sub", (a, b),
                         lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Value:
    a, b = lift(a), lift(b)
    ad, bd = a.data, b.data
    return Value._result(ad * bd, "mul", (a, b),
                         lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Value:
    a, b = lift(a), lift(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise NonFiniteError("div", "division by zero")
    out = ad / bd
    return Value._result(out, "div", (a, b),
                         lambda g: (_unbroadcast(g / bd, ad.shape),
                                    _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return Value._result(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Value:
    a, b = lift(a), lift(b)
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Value._result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


# elementwise unary --------------------------------------------------------------

def exp(a: Value) -> Value:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Value._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    ad = a.data
    if np.any(ad <= 0.0):
        raise NonFiniteError("log", "non-positive argument")
    return Value._result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def relu(a: Value) -> Value:
    mask = a.data > 0.0
    return Value._result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Value) -> Value:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Value._result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def square(a: Value) -> Value:
    ad = a.data
    return Value._result(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def clamp_min(a: Value, floor: float) -> Value:
    keep = a.data >= floor
    return Value._result(np.where(keep, a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


# reductions and shape --------------------------------------------------------------

def sum_(a: Value, axis: int | None = None) -> Value:
    shape = a.shape
    if axis is None:
        out = np.array([[a.data.sum()]])
    else:
        out = a.data.sum(axis=axis, keepdims=True)
    return Value._result(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def max_(a: Value) -> Value:
    """Global maximum; the gradient goes to the first maximising entry."""
    flat = int(np.argmax(a.data))
    return _pick(a, flat, "max")


def min_(a: Value) -> Value:
    flat = int(np.argmin(a.data))
    return _pick(a, flat, "min")


def _pick(a: Value, flat: int, op: str) -> Value:
    shape = a.shape
    idx = np.unravel_index(flat, shape)

    def back(g):
        out = np.zeros(shape)
        out[idx] = g[0, 0]
        return (out,)

    return Value._result(np.array([[a.data[idx]]]), op, (a,), back)


def transpose(a: Value) -> Value:
    return Value._result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Value, rows: int, cols: int) -> Value:
    shape = a.shape
    if rows * cols != a.data.size:
        raise ValueError(f"cannot reshape {shape} to ({rows}, {cols})")
    return Value._result(a.data.reshape(rows, cols).copy(), "reshape", (a,),
                         lambda g: (g.reshape(shape),))


def index(a: Value, key) -> Value:
    """Basic or integer-array indexing that keeps the result 2-D."""
    shape = a.shape
    if not isinstance(key, tuple):
        key = (key, slice(None))
    out = a.data[key]
    if out.ndim != 2:
        raise ValueError("index must keep a 2-D result; use slices or 1-D index arrays")

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return Value._result(np.array(out, copy=True), "index", (a,), back)


def concat_rows(parts: Sequence[Value]) -> Value:
    parts = [lift(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows of empty sequence")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ValueError("concat_rows column mismatch")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Value._result(np.vstack([p.data for p in parts]), "concat_rows", parts, back)


# normalisations -----------------------------------------------------------------

def softmax(a: Value, axis: int) -> Value:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Value._result(out, "softmax", (a,), back)


def log_softmax(a: Value, axis: int) -> Value:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Value._result(out, "log_softmax", (a,), back)


def logsumexp_plus(a: Value, b: Value, axis: int) -> Value:
    """``log(sum(exp(a + b), axis))`` with broadcasting between ``a`` and ``b``.

    The broadcast sum is never stored; the backward pass recomputes the
    softmax weights from the inputs and the output.
    """
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    x = a.data + b.data
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    ad, bd = a.data, b.data

    def back(g):
        w = np.exp(ad + bd - out) * g
        return (_unbroadcast(w, sa), _unbroadcast(w, sb))

    return Value._result(out, "logsumexp", (a, b), back)


def cosine_rows(a: Value, b: Value) -> Value:
    """Pairwise cosine between rows of ``a`` (m x h) and ``b`` (n x h).

    Rows with norm below ``COSINE_EPS`` produce cosine 0 and receive no
    gradient through that pair.
    """
    a, b = lift(a), lift(b)
    if a.cols != b.cols:
        raise ValueError(f"cosine dimension mismatch: {a.cols} vs {b.cols}")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=1, keepdims=True)
    nb = np.linalg.norm(bd, axis=1, keepdims=True)
    ok_a = na >= COSINE_EPS
    ok_b = nb >= COSINE_EPS
    ua = np.where(ok_a, ad / np.where(ok_a, na, 1.0), 0.0)
    ub = np.where(ok_b, bd / np.where(ok_b, nb, 1.0), 0.0)
    out = ua @ ub.T

    def back(g):
        # d cos / d a = (ub - cos * ua) / |a|
        ga = (g @ ub - (g * out).sum(axis=1, keepdims=True) * ua) / np.where(ok_a, na, 1.0)
        gb = (g.T @ ua - (g * out).sum(axis=0)[:, None] * ub) / np.where(ok_b, nb, 1.0)
        return (np.where(ok_a, ga, 0.0), np.where(ok_b, gb, 0.0))

    return Value._result(out, "cosine", (a, b), back)


# stop-gradient barrier --------------------------------------------------------------

class BarrierLog:
    """Records values crossing barriers, or replays previously recorded ones."""

    def __init__(self, replay: Sequence[Array] | None = None):
        self.replay = None if replay is None else list(replay)
        self.values: list[Array] = []
        self.cursor = 0

    def visit(self, data: Array) -> Array:
        if self.replay is None:
            self.values.append(data.copy())
            return data
        if self.cursor >= len(self.replay):
            raise RuntimeError("barrier replay exhausted: evaluation path changed")
        frozen = self.replay[self.cursor]
        self.cursor += 1
        if frozen.shape != data.shape:
            raise RuntimeError("barrier replay shape mismatch: evaluation path changed")
        return frozen


_BARRIER_LOG: contextvars.ContextVar[BarrierLog | None] = contextvars.ContextVar(
    "spegc_barrier_log", default=None)


def stop_gradient(a: Value) -> Value:
    """Forward identity, exact zero gradient backward."""
    data = a.data.copy()
    log_ = _BARRIER_LOG.get()
    if log_ is not None:
        data = log_.visit(data).copy()
    out = Value._result(data, "stop_gradient", (), None)
    return out


# backward ---------------------------------------------------------------------

def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value, params: Mapping[str, Value] | Iterable[Value] | None = None):
    """Reverse-mode gradient of a scalar ``loss``.

    Returns ``{name: grad}`` when ``params`` is a mapping, a list of grads in
    order when it is an iterable, and sets ``.grad`` on every reached leaf.
    Parameters the loss does not reach get exact zeros.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Array] = {}
    leaves: dict[int, Value] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones((1, 1))
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None:
                continue
            if not node.parents:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                check_finite(pg, f"backward:{node.op}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    for key, leaf in leaves.items():
        leaf.grad = grads[key]

    def grad_of(p: Value) -> Array:
        g = grads.get(id(p)) if id(p) in leaves else None
        return np.zeros_like(p.data) if g is None else g

    if params is None:
        return {leaf.name or f"leaf{i}": leaf.grad for i, leaf in enumerate(leaves.values())}
    if isinstance(params, Mapping):
        return {k: grad_of(v) for k, v in params.items()}
    return [grad_of(p) for p in params]


# finite-difference oracle ------------------------------------------------------------

class NondeterminismError(RuntimeError):
    pass


def _scalar(out) -> float:
    return out.item() if isinstance(out, Value) else float(out)


def fd_oracle(f: Callable[[], Value | float], params: Mapping[str, Value],
              rel_step: float = 1e-4) -> dict[str, Array]:
    """Central-difference gradient of ``f`` with barrier inputs held fixed.

    ``f`` takes no arguments and must rebuild its result from the current
    contents of ``params`` (which are perturbed in place and restored).
    Values crossing ``stop_gradient`` during a base evaluation are replayed
    verbatim in every perturbed evaluation, so the result is the gradient of
    the surrogate in which barrier inputs are constants.
    """
    base_log = BarrierLog()
    token = _BARRIER_LOG.set(base_log)
    try:
        base = _scalar(f())
    finally:
        _BARRIER_LOG.reset(token)
    check_log = BarrierLog()
    token = _BARRIER_LOG.set(check_log)
    try:
        again = _scalar(f())
    finally:
        _BARRIER_LOG.reset(token)
    same_barriers = len(base_log.values) == len(check_log.values) and all(
        np.array_equal(x, y) for x, y in zip(base_log.values, check_log.values))
    if base != again or not same_barriers:
        raise NondeterminismError(f"f is not deterministic: {base!r} vs {again!r}")

    def evaluate() -> float:
        token = _BARRIER_LOG.set(BarrierLog(replay=base_log.values))
        try:
            return _scalar(f())
        finally:
            _BARRIER_LOG.reset(token)

    out: dict[str, Array] = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        for idx in np.ndindex(*p.shape):
            w = p.data[idx]
            h = rel_step * max(1.0, abs(w))
            p.data[idx] = w + h
            fp = evaluate()
            p.data[idx] = w - h
            fm = evaluate()
            p.data[idx] = w
            g[idx] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|n|, max|a|, floor)`` over one parameter group."""
    scale_ = max(float(np.max(np.abs(numeric), initial=0.0)),
                 float(np.max(np.abs(analytic), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale_
