"""Central finite-difference oracle shared by the gradient tests."""

import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from deskmae import tensor as T


def numeric_grad(f, arrays, wrt, h=1e-5):
    """d f(arrays) / d arrays[wrt] by central differences on raw numpy data."""
    base = [a.copy() for a in arrays]
    x = base[wrt]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(*base)
        flat[i] = old - h
        fm = f(*base)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(op, arrays, h=1e-5, rng=None):
    """Compare analytic gradients of ``sum(op(...) * w)`` with finite differences.

    A fixed random weighting ``w`` keeps the check from passing on gradients
    that are only correct in their sum. Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    probe = op(*[T.Tensor(a) for a in arrays])
    w = np.asarray(rng.standard_normal(probe.shape)).reshape(probe.shape)

    def scalar(*arrs):
        return float((op(*[T.Tensor(a) for a in arrs]).data * w).sum())

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    loss = T.sum_(T.mul(out, T.Tensor(w)))
    T.backward(loss, inputs=leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, arrays, i, h)
        denom = max(np.abs(num).max(), np.abs(leaf.grad).max(), 1e-8)
        worst = max(worst, float(np.abs(num - leaf.grad).max() / denom))
    return worst


# ---------------------------------------------------------------------------
# the suite: every differentiable op on at least five shapes
# ---------------------------------------------------------------------------

TOL = 1e-4


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


@dataclass(frozen=True)
class Case:
    op_name: str
    shape: tuple
    op: Callable
    shapes: tuple
    seed: int

    @property
    def label(self) -> str:
        return f"{self.op_name}-{'x'.join(map(str, self.shape))}"

    def run(self) -> float:
        return check(self.op, [rand(s, self.seed + i) for i, s in enumerate(self.shapes)])


def _ln(x, g, b):
    return T.layer_norm(x, g, b, eps=1e-5)


def _bn(x):
    return T.batch_norm_noaffine(x, eps=1e-5)[0]


def _drop(x):
    return T.drop_mask(x, 0.6, np.random.default_rng(3))


def _drop_elem(x):
    return T.drop_mask(x, 0.6, np.random.default_rng(3), per_sample=False)


def _gather(x):
    ids = np.stack([np.random.default_rng(i).permutation(x.shape[1])[:2] for i in range(x.shape[0])])
    return T.gather_rows(x, ids)


def _scatter(x):
    ids = np.stack([np.random.default_rng(i).permutation(x.shape[1] + 2)[: x.shape[1]] for i in range(x.shape[0])])
    return T.scatter_rows(x, ids, x.shape[1] + 2)


def _ce(x):
    return T.cross_entropy(x, np.arange(x.shape[0]) % x.shape[-1])


def _ce_soft(x):
    t = np.random.default_rng(5).random(x.shape)
    return T.cross_entropy(x, t / t.sum(axis=-1, keepdims=True))


def _embed(table):
    return T.embedding(table, np.array([0, table.shape[0] - 1, 0]))


def _expand(v):
    return T.expand_rows(v, 2, 3)


def _concat(a, b):
    return T.concat([a, b], axis=1)


def _linear(x, w, b):
    return T.linear(x, w, b)


UNARY = {
    "gelu": T.gelu,
    "softmax": T.softmax_rows,
    "scale": lambda x: T.scale(x, -1.7),
    "square": T.square,
    "neg": lambda x: -x,
    "sum_all": T.sum_,
    "sum_axis0": lambda x: T.sum_(x, 0),
    "mean_last": lambda x: T.mean(x, -1),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "transpose": T.transpose,
    "index": lambda x: x[:, 1:],
    "batch_norm": _bn,
    "drop_path": _drop,
    "dropout": _drop_elem,
    "gather_rows": _gather,
    "scatter_rows": _scatter,
    "cross_entropy": _ce,
    "cross_entropy_soft": _ce_soft,
    "embedding": _embed,
}

ROWS_2D = [(2, 3), (3, 4), (4, 2), (5, 3), (3, 6)]
ROWS_3D = [(2, 3, 2), (1, 4, 3), (3, 3, 2), (2, 5, 1), (2, 2, 4)]
ROW_OPS = {"gather_rows", "scatter_rows"}


def _cases():
    out = []
    for name, op in UNARY.items():
        seed = zlib.crc32(name.encode()) % 1000
        shapes = ROWS_3D if name in ROW_OPS else ROWS_2D + ROWS_3D[:1]
        if name.startswith("cross_entropy") or name == "batch_norm":
            shapes = ROWS_2D
        out += [Case(name, s, op, (s,), seed) for s in shapes]
    for name, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        for s in [(2, 3), (3, 1), (4, 2, 3), (1, 5), (2, 2, 2)]:
            out.append(Case(name, s, op, (s, s), 1))
        for s in ROWS_3D:
            out.append(Case(f"{name}_suffix1", s, op, (s, s[-1:]), 1))
            out.append(Case(f"{name}_suffix2", s, op, (s, s[-2:]), 3))
    for m, k, n in [(1, 1, 1), (2, 3, 4), (5, 4, 3), (3, 7, 2), (6, 2, 5)]:
        out.append(Case("matmul", (m, k, n), T.matmul, ((m, k), (k, n)), 1))
        out.append(Case("matmul_shared", (m, k, n), T.matmul, ((2, m, k), (k, n)), 3))
        out.append(Case("matmul_batched", (m, k, n), T.matmul, ((2, m, k), (2, k, n)), 5))
        out.append(Case("linear", (m, k, n), _linear, ((2, m, k), (k, n), (n,)), 7))
    for s in ROWS_2D:
        out.append(Case("layer_norm", s, _ln, (s, s[-1:], s[-1:]), 1))
    for d in (1, 2, 3, 4, 6):
        out.append(Case("expand_rows", (d,), _expand, ((d,),), 2))
    for s in ROWS_3D:
        out.append(Case("concat", s, _concat, (s, s), 1))
    return out


CASES = _cases()


def shapes_per_op() -> Counter:
    """Distinct operand shapes checked per op."""
    return Counter(op for op, _ in {(c.op_name, c.shapes) for c in CASES})
