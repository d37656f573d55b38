"""Dense float tensors with tape-based reverse-mode differentiation.

Every op whose inputs require gradients records a node stamped with a
monotonically increasing sequence number.  ``backward`` collects the nodes
reachable from a scalar loss, orders them by sequence number and replays them
in reverse.  Because each simulated rank builds its own graph in program order,
collective nodes (whose backward passes communicate) are visited in the same
relative order on every rank, which is what lets gradient-carrying collectives
rendezvous during backward.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_seq = itertools.count()
_default_dtype = np.float64

ROPE_BASE = 10000.0


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch new tensors to ``float32`` for performance runs (``float64`` otherwise)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "collective", "consumed")

    def __init__(self, op, parents, backward_fn, collective=False):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.collective = collective
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "exact", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        # exact value of a scalar sum, carried through reproducible reductions
        self.exact: Optional[Fraction] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out.exact = self.exact
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _record(data, parents: Sequence[Tensor], backward_fn, op: str, collective=False) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn, collective)
    return out


def custom_op(data, parents: Sequence[Tensor], backward_fn, op: str, collective=False) -> Tensor:
    """Register a hand-written op on the tape.

    ``backward_fn`` receives the upstream gradient array and returns one array
    (or ``None``) per parent.  Collective ops are always replayed on every rank,
    with a zero upstream gradient if the output did not reach the loss.
    """
    return _record(data, parents, backward_fn, op, collective)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x) without overflow; ``softplus(-x) == -log(sigmoid(x))``."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _record(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


# -- shape ops -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(np.array(a.data[idx]), (a,), bw, "getitem")


def take(a, indices, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = (slice(None),) * axis + (np.asarray(indices),)
    return getitem(a, idx)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(ts))
        )

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def pad_axis(a, axis: int, after: int) -> Tensor:
    """Append ``after`` zero slices along ``axis``; backward drops their gradient."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if after == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, after)
    n = a.shape[axis]
    return _record(
        np.pad(a.data, widths),
        (a,),
        lambda g: (g[(slice(None),) * axis + (slice(0, n),)],),
        "pad",
    )


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(n)


def exact_sum(a) -> Tensor:
    """Scalar sum rounded once from the exact real-number result.

    The exact value rides along on ``.exact`` so that a reproducible
    all-reduce can combine shards without intermediate rounding; the result is
    then bitwise independent of how the summands were partitioned.
    """
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    if not np.all(np.isfinite(flat)):
        # no exact value for inf/nan; fall back to a plain float sum
        total = None
        value = np.sum(flat)
    else:
        total = sum((Fraction(float(v)) for v in flat), Fraction(0))
        value = float(total)
    out = _record(
        np.asarray(value, dtype=a.data.dtype),
        (a,),
        lambda g: (np.full(a.shape, g, dtype=a.data.dtype),),
        "exact_sum",
    )
    out.exact = total
    return out


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), bw, "matmul")


# -- softmax family ------------------------------------------------------


def stable_softmax_lastdim(x, mask=None, return_masked_rows: bool = False):
    """Row softmax over the last axis with max subtraction.

    ``mask`` is additive (0 keeps, -inf drops) and broadcast against ``x``.  A
    row whose entries are all masked yields zeros instead of NaN; pass
    ``return_masked_rows=True`` to also get a boolean array flagging them.
    """
    x = as_tensor(x)
    y = x.data if mask is None else x.data + np.asarray(mask, dtype=x.data.dtype)
    m = np.max(y, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(y - m)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    res = _record(out, (x,), bw, "softmax")
    if return_masked_rows:
        return res, dead[..., 0]
    return res


softmax = stable_softmax_lastdim


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    z = x.data - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


# -- rotary embedding ----------------------------------------------------


def rope_angles(position_ids, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Angles ``pos * base**(-2j/dim)`` of shape [len(position_ids), dim/2]."""
    inv = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(position_ids, dtype=np.float64)[:, None] * inv[None, :]


def rope_apply(x, position_ids, seq_axis: Optional[int] = None) -> Tensor:
    """Rotate feature pairs (j, j + dim/2) by position-dependent angles.

    ``seq_axis`` defaults to 0 for 2-D input and 1 otherwise (the
    [bs, seq, heads, dim] layout).  Negated positions undo the rotation.
    """
    x = as_tensor(x)
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope needs an even last dim, got {dim}")
    if seq_axis is None:
        seq_axis = 0 if x.ndim == 2 else 1
    seq_axis %= x.ndim
    pos = np.asarray(position_ids)
    if pos.ndim != 1 or pos.shape[0] != x.shape[seq_axis]:
        raise ShapeError(
            f"position_ids length {pos.shape} does not match sequence extent {x.shape[seq_axis]}"
        )
    ang = rope_angles(pos, dim)
    shape = [1] * x.ndim
    shape[seq_axis] = pos.shape[0]
    shape[-1] = dim // 2
    cos = np.cos(ang).reshape(shape).astype(x.data.dtype)
    sin = np.sin(ang).reshape(shape).astype(x.data.dtype)

    def rotate(v, s):
        h = v.shape[-1] // 2
        v1, v2 = v[..., :h], v[..., h:]
        return np.concatenate([v1 * cos - v2 * s, v2 * cos + v1 * s], axis=-1)

    return _record(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope")


# -- composite helpers ---------------------------------------------------


def rms_norm(x, weight, eps: float) -> Tensor:
    x = as_tensor(x)
    scale = power(mean(x * x, axis=-1, keepdims=True) + eps, -0.5)
    return x * scale * weight


# -- backward ------------------------------------------------------------


class GradTape:
    """Ordered record of the ops reachable from a root, replayed in reverse."""

    def __init__(self, root: Tensor):
        self.root = root
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            if t.node.consumed:
                raise BackwardError("backward called on an already consumed tape")
            entries.append(t)
            stack.extend(p for p in t.node.parents if p.requires_grad)
        entries.sort(key=lambda t: t.node.seq)
        self.entries: list[Tensor] = entries

    def __len__(self):
        return len(self.entries)

    def replay(self, seed: np.ndarray) -> list[str]:
        grads = {id(self.root): seed}
        visited = []
        for t in reversed(self.entries):
            node = t.node
            g = grads.pop(id(t), None)
            if g is None and node.collective:
                g = np.zeros_like(t.data)
            if g is not None:
                t.grad = g
                parent_grads = node.backward_fn(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
                    if p.node is None:
                        p.grad = pg.copy() if p.grad is None else p.grad + pg
                    elif id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            node.consumed = True
            node.backward_fn = None
            visited.append(node.op)
        return visited


def backward(loss: Tensor, grad=None) -> None:
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is not connected to any tensor requiring grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
    if loss.node is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    GradTape(loss).replay(seed)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices: Iterable = None):
    """Central finite differences of scalar ``f`` w.r.t. entries of ``x`` (mutated in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(float(sum(float(np.sum(a * a)) for a in arrays)))
