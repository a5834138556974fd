"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
computing the parents' gradients from its own.  The closure captures
whatever forward values the rule needs, so the set of live tensors reachable
from a loss *is* the tape.  :func:`backward` walks it in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np
from scipy import sparse

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, metrics)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    _state.debug = bool(flag)


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars / arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug() and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "subtract")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "multiply",
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "divide",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D operands, or a batched (..., n, k) @ (k, m)."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


# ----------------------------------------------------------------------------
# elementwise unary ops


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


# ----------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximiser."""
    ax = axis % a.ndim
    x = np.moveaxis(a.data, ax, 0)
    best = x[0].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    # running scan beats argmax on a strided axis; strict '>' keeps the first maximiser
    for k in range(1, x.shape[0]):
        upd = x[k] > best
        np.copyto(best, x[k], where=upd)
        arg[upd] = k
    n = a.shape[ax]

    def back(g):
        onehot = np.arange(n).reshape((n,) + (1,) * g.ndim) == arg[None]
        full = onehot * g[None].astype(g.dtype)
        return (np.moveaxis(full, 0, ax),)

    return _make(best, (a,), back, "max")


@numba.njit(cache=True)
def _segment_argmax(x, starts):
    n_seg = starts.shape[0]
    n, c = x.shape
    out = np.empty((n_seg, c), dtype=x.dtype)
    arg = np.empty((n_seg, c), dtype=np.int64)
    for s in range(n_seg):
        lo = starts[s]
        hi = starts[s + 1] if s + 1 < n_seg else n
        for j in range(c):
            out[s, j] = x[lo, j]
            arg[s, j] = lo
        for r in range(lo + 1, hi):
            for j in range(c):
                if x[r, j] > out[s, j]:
                    out[s, j] = x[r, j]
                    arg[s, j] = r
    return out, arg


@numba.njit(cache=True)
def _scatter_rows(g, arg, n):
    full = np.zeros((n, g.shape[1]), dtype=g.dtype)
    for s in range(g.shape[0]):
        for j in range(g.shape[1]):
            full[arg[s, j], j] += g[s, j]
    return full


def segment_max(a: Tensor, starts: np.ndarray) -> Tensor:
    """Max over contiguous row segments of a 2-D tensor.

    ``starts`` holds the first row of each (non-empty) segment in increasing
    order; the gradient goes to the first maximising row of each segment.
    """
    if a.ndim != 2:
        raise ShapeError(f"segment_max: expected a 2-D tensor, got shape {a.shape}")
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    out, arg = _segment_argmax(np.ascontiguousarray(a.data), starts)
    n = a.shape[0]
    return _make(out, (a,), lambda g: (_scatter_rows(np.ascontiguousarray(g), arg, n),), "segment_max")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=ax, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s
    if not keepdims:
        out = out.squeeze(ax)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * soft,)

    return _make(out, (a,), back, "logsumexp")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, back, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = a.shape
    out = a.data[idx]

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.asarray(out), (a,), back, "slice")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0 with an integer index array of any shape."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        # scatter-add as a sparse product: fixed summation order, much faster than np.add.at
        flat = index.reshape(-1)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(shape[0], flat.size)
        )
        return (np.asarray(scatter @ g.reshape(flat.size, -1)).reshape(shape),)

    return _make(a.data[index], (a,), back, "take")


# ----------------------------------------------------------------------------
# layers


def dropout(a: Tensor, keep_prob: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, scaled Bernoulli mask in train mode."""
    if not train or keep_prob >= 1.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = rng.random(a.shape, dtype=np.float32) < keep_prob
    mask = mask.astype(a.dtype) * a.dtype.type(1.0 / keep_prob)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in); ``x`` may carry leading batch axes."""
    x = as_tensor(x, w.dtype)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(lead + (wd.shape[0],))
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {wd.shape}")
        out += b.data

    def back(g):
        # frozen operands skip their (expensive) gradient products
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "linear")


def weight_norm_linear(x: Tensor, v: Tensor, g: Tensor, b: Tensor | None = None) -> Tensor:
    """Linear layer with weight rows reparameterised as ``g * v / ||v||``.

    A 1e-12 floor under the squared norm keeps all-zero ``v`` finite.
    """
    if v.ndim != 2 or g.shape != (v.shape[0],):
        raise ShapeError(f"weight_norm_linear: incompatible shapes v={v.shape} g={g.shape}")
    norm = sqrt(add(sum_(square(v), axis=1, keepdims=True), 1e-12))
    w = mul(v, div(reshape(g, (-1, 1)), norm))
    return linear(x, w, b)


# ----------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(
    loss: Tensor,
    params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict:
    """Gradients of a scalar ``loss``.

    With a name->Tensor mapping, returns name->ndarray (zeros for leaves the
    loss does not reach).  With an iterable, returns a list in the same order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                if pg.dtype != p.dtype:
                    pg = pg.astype(p.dtype)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    def grad_of(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape)

    if params is None:
        return {}
    if isinstance(params, Mapping):
        return {k: grad_of(t) for k, t in params.items()}
    return [grad_of(t) for t in params]
