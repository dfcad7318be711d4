"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward rule on the output
tensor. :func:`backward` linearizes the recorded graph into a tape
(topological order) and walks it once in reverse.

Broadcasting is deliberately limited: the second operand of an element-wise
op may match a *suffix* of the first operand's shape (bias vectors,
positional tables), nothing more general.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    Args:
        data: array-like payload; copied to a numpy array of ``dtype``.
        requires_grad: accumulate ``grad`` for this tensor during backward.
        dtype: storage dtype; defaults to the payload's float dtype or float64.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "retain_grad",
                 "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data: np.ndarray = np.array(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.retain_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape), dtype=like.dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.retain_grad = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not suffix-compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead else grad


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)
    return _make(a.data * c_arr, (a,), lambda g: (g * c_arr,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a matrix ``[k, n]`` shared across all leading axes of
    ``a`` (linear layers) or has the same leading axes as ``a`` (attention).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the two trailing axes."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    out = a.data[key]
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _make(np.array(out, order="C"), (a,), back, "index")


def gather_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick rows ``ids[b, j]`` from ``x[b]`` giving ``[batch, len(ids[b]), ...]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim < 2 or ids.ndim != 2 or ids.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} vs ids {ids.shape}")
    bidx = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (bidx, ids), g)
        return (full,)

    return _make(x.data[bidx, ids], (x,), back, "gather_rows")


def scatter_rows(x: Tensor, ids: np.ndarray, n_rows: int) -> Tensor:
    """Place row ``j`` of ``x[b]`` at position ``ids[b, j]`` of a zero ``[batch, n_rows, ...]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:2]:
        raise ShapeError(f"scatter_rows: x {x.shape} vs ids {ids.shape}")
    bidx = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], n_rows) + x.shape[2:], dtype=x.dtype)
    out[bidx, ids] = x.data
    return _make(out, (x,), lambda g: (g[bidx, ids],), "scatter_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), back, "embedding")


def expand_rows(v: Tensor, batch: int, count: int) -> Tensor:
    """Tile a vector ``[d]`` into ``[batch, count, d]`` (mask tokens, class tokens)."""
    if v.ndim != 1:
        raise ShapeError(f"expand_rows expects a vector, got {v.shape}")
    out = np.broadcast_to(v.data, (batch, count, v.shape[0])).copy()
    return _make(out, (v,), lambda g: (g.sum(axis=(0, 1)),), "expand_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum_(a, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _make((xd * cdf).astype(xd.dtype, copy=False), (x,), back, "gelu")


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def back(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, d).sum(axis=0)
        return gx, ggam, gbet

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def batch_norm_noaffine(x: Tensor, eps: float = 1e-6) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Standardize each column of ``x [batch, d]`` with batch statistics.

    Returns the normalized tensor plus the batch mean and (biased) variance,
    which callers fold into running statistics.
    """
    xd = x.data
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = (xc * xc).mean(axis=0)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        return (rstd * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)),)

    return _make(xhat, (x,), back, "batch_norm"), mu, var


def drop_mask(x: Tensor, keep_prob: float, rng: np.random.Generator, per_sample: bool = True) -> Tensor:
    """Stochastic zeroing with ``1/keep_prob`` rescaling of survivors.

    With ``per_sample`` the decision is made once per leading index (drop
    path over residual branches); otherwise per element (dropout).
    """
    if keep_prob >= 1.0:
        return x
    if not 0.0 < keep_prob < 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    mshape = (x.shape[0],) + (1,) * (x.ndim - 1) if per_sample else x.shape
    m = (rng.random(mshape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    m = np.broadcast_to(m, x.shape)
    return _make(x.data * m, (x,), lambda g: (g * m,), "drop")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean soft-target cross-entropy; ``targets`` are probability rows or class ids."""
    ld = logits.data
    if targets.ndim == 1:
        hot = np.zeros_like(ld)
        hot[np.arange(ld.shape[0]), targets.astype(np.int64)] = 1.0
        targets = hot
    targets = targets.astype(ld.dtype, copy=False)
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    b = ld.shape[0]
    loss = -(targets * logp).sum() / b

    def back(g):
        p = np.exp(logp)
        return (g * (p * targets.sum(axis=-1, keepdims=True) - targets) / b,)

    return _make(np.asarray(loss, dtype=ld.dtype), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def tape_of(loss: Tensor) -> list[Tensor]:
    """Operations reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Intermediate tensors keep their gradient only when ``retain_grad`` is set.
    Tensors listed in ``inputs`` that the loss does not reach get a zero
    gradient instead of ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    order = tape_of(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retain_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if inputs is not None:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
