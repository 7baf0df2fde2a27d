"""A small reverse-mode differentiation engine over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs is tracked. Outside a tape,
the same functions run as plain numpy forward passes.

Broadcasting is limited to scalars and row/column vectors against matrices;
anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, RootNotScalar, ShapeMismatch

_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)
_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "node_id", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor operators

    def __init__(self, data, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: take(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class _Record:
    out: int
    parents: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; parents always precede their children."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None

    def watch(self, value) -> Tensor:
        """Register a differentiable leaf."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.node_id = next(_ids)
        self.leaves[t.node_id] = t
        return t

    def leaf(self, value) -> Tensor:
        return self.watch(Tensor(np.array(value, dtype=np.float64)))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{op} produced a non-finite value")
    return a


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    _finite(out, op)
    tape = _ACTIVE.get()
    parents = tuple(t.node_id for t in inputs)
    if tape is None or all(p is None for p in parents):
        return Tensor(out)
    node = next(_ids)
    tape.records.append(_Record(node, parents, vjp))
    return Tensor(out, node)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) == 2 and len(b) == 2:
        ok = all(x == y or x == 1 or y == 1 for x, y in zip(a, b))
        if ok and (1 in a or 1 in b):
            return
    if len(a) == 2 and len(b) == 1 and b[0] == a[1]:
        return
    if len(b) == 2 and len(a) == 1 and a[0] == b[1]:
        return
    if np.prod(a) == 1 or np.prod(b) == 1:
        return
    raise ShapeMismatch(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --- elementwise binary --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _emit(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


# --- elementwise unary ---------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise NonFinite("log of a non-positive value")
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFinite("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient is zero where clamped."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _emit("maximum", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# --- reductions and shape ops -------------------------------------------


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis, keepdims), 1.0 / n)


def logsumexp(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis`` (all entries when None)."""
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else (np.squeeze(out_k, axis=axis) if axis is not None else out_k.reshape(()))

    def vjp(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis) if axis is not None else gg.reshape((1,) * x.ndim)
        return (gg * soft,)

    return _emit("logsumexp", out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch("softmax_rows expects a matrix")
    x = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=1, keepdims=True)
    return _emit(
        "softmax_rows", out, (a,),
        lambda g: (out * (g - np.sum(g * out, axis=1, keepdims=True)),),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def take(a, idx) -> Tensor:
    """Numpy-style indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", np.array(a.data[idx], dtype=np.float64), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


# --- fused ops used by the attention stack ------------------------------


def l2_distance_matrix(a, b) -> Tensor:
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"l2_distance_matrix: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[:, None, :] - bd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return _emit("l2_distance_matrix", out, (a, b), vjp)


def pair_dot(a, e) -> Tensor:
    """``out[i, j] = a[i] . e[i, j]`` for a (n, d) matrix and (n, m, d) array."""
    a, e = as_tensor(a), as_tensor(e)
    if a.ndim != 2 or e.ndim != 3 or e.shape[0] != a.shape[0] or e.shape[2] != a.shape[1]:
        raise ShapeMismatch(f"pair_dot: {a.shape} vs {e.shape}")
    ad, ed = a.data, e.data
    return _emit(
        "pair_dot", np.einsum("id,ijd->ij", ad, ed), (a, e),
        lambda g: (np.einsum("ij,ijd->id", g, ed), g[:, :, None] * ad[:, None, :]),
    )


def normalize_rows(a, eps: float = 0.0) -> Tensor:
    """Project each row onto the unit sphere."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + eps)
    out = x / norm

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norm,)

    return _emit("normalize_rows", out, (a,), vjp)


# --- backward ------------------------------------------------------------


class GradientMap(dict):
    """Maps node ids to gradients; also indexable by the leaf Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            return self.get(key.node_id, np.zeros_like(key.data))
        return super().__getitem__(key)


def backward(tape: Tape, root: Tensor) -> GradientMap:
    """d(root)/d(leaf) for every leaf watched by ``tape``."""
    if root.data.size != 1:
        raise RootNotScalar(f"root has shape {root.shape}")
    if root.node_id is None:
        return GradientMap({k: np.zeros_like(t.data) for k, t in tape.leaves.items()})
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out, None)
        if g is None:
            continue
        for pid, pg in zip(rec.parents, rec.vjp(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)
    out = GradientMap()
    for k, t in tape.leaves.items():
        out[k] = grads.get(k, np.zeros_like(t.data)).reshape(t.shape)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[float]:
    """Relative error between tape gradients and central differences, per input.

    ``fn`` receives Tensors and must return a scalar Tensor. The error for each
    input is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-12)`` in the 2-norm.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        leaves = [tape.leaf(x) for x in inputs]
        root = fn(*leaves)
    grads = backward(tape, root)
    errs = []
    for k, x in enumerate(inputs):
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*[Tensor(v) for v in inputs]).item()
            flat[i] = old - h
            fm = fn(*[Tensor(v) for v in inputs]).item()
            flat[i] = old
            fd.reshape(-1)[i] = (fp - fm) / (2 * h)
        ga = grads[leaves[k]]
        scale = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-12)
        errs.append(float(np.linalg.norm(ga - fd) / scale))
    return errs
