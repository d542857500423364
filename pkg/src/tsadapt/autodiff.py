"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is numpy under the hood; the graph is built eagerly by the op
functions below, each of which attaches a backward closure to its output.
`backward()` walks the graph in reverse topological order and accumulates
gradients into every reachable tensor that has `requires_grad` set.

Gradients accumulate across calls (`+=` semantics); call `zero_grads` on
your parameter list between optimizer steps.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "zero_grads",
    "topo_order",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "narrow",
    "reshape",
    "tile_rows",
    "block_sum_rows",
    "sum_",
    "mean_",
    "embedding_lookup",
    "layer_norm",
    "gru_cell",
    "dropout_mask",
    "finite_difference_check",
    "FdReport",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / frozen models)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float64 array plus an accumulated gradient and a graph edge.

    `_parents` and `_backward` record the producing operation; leaves have
    neither. `grad` is lazily allocated the first time something flows into
    it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- graph plumbing ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # always copy on first write: g may alias another node's grad buffer
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        track = False
        needs_grad = False
        for p in parents:
            if p.requires_grad:
                track = needs_grad = True
                break
            if p._parents:
                track = True
        if track:
            out.requires_grad = needs_grad
            out._parents = parents
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bk(out):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _make(out_data, (a, b), bk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bk(out):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-out.grad, b.data.shape))

    return _make(out_data, (a, b), bk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bk(out):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _make(out_data, (a, b), bk)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def bk(out):
        a._accumulate(out.grad * k)

    return _make(a.data * k, (a,), bk)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bk(out):
        a._accumulate(out.grad * (1.0 - y * y))

    return _make(y, (a,), bk)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0, e) / (1.0 + e)

    def bk(out):
        a._accumulate(out.grad * y * (1.0 - y))

    return _make(y, (a,), bk)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bk(out):
        a._accumulate(out.grad * y)

    return _make(y, (a,), bk)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    y = np.log(a.data)

    def bk(out):
        a._accumulate(out.grad / a.data)

    return _make(y, (a,), bk)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bk(out):
        if a.requires_grad or a._parents:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad or b._parents:
            b._accumulate(a.data.T @ out.grad)

    return _make(out_data, (a, b), bk)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bk(out):
        g = out.grad
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bk)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bk(out):
        g = out.grad
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), bk)


# -- shape manipulation ------------------------------------------------------


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bk(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(out.grad[tuple(idx)])

    return _make(out_data, tuple(parts), bk)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the `slice` op)."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow out of range on axis {axis}: [{start}, {start + length}) of {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bk(out):
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        a._accumulate(g)

    return _make(a.data[idx].copy(), (a,), bk)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bk(out):
        a._accumulate(out.grad.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bk)


def tile_rows(a: Tensor, k: int) -> Tensor:
    """Stack k copies of a 2-D tensor on top of each other: (m, d) -> (k*m, d)."""
    m = a.data.shape[0]

    def bk(out):
        a._accumulate(out.grad.reshape(k, m, -1).sum(axis=0))

    return _make(np.tile(a.data, (k, 1)), (a,), bk)


def block_sum_rows(a: Tensor, k: int) -> Tensor:
    """Sum k stacked row-blocks of a 2-D tensor: (k*m, d) -> (m, d)."""
    km, d = a.data.shape
    if km % k != 0:
        raise ShapeError(f"block_sum_rows: {km} rows not divisible by {k}")
    m = km // k

    def bk(out):
        a._accumulate(np.tile(out.grad, (k, 1)))

    return _make(a.data.reshape(k, m, d).sum(axis=0), (a,), bk)


# -- reductions --------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def bk(out):
        if axis is None:
            a._accumulate(np.broadcast_to(out.grad, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape).copy())

    return _make(out_data, (a,), bk)


def mean_(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out_data = a.data.mean(axis=axis)

    def bk(out):
        if axis is None:
            a._accumulate(np.broadcast_to(out.grad / n, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(out.grad / n, axis), a.data.shape).copy())

    return _make(out_data, (a,), bk)


# -- network building blocks -------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding_lookup expects a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding index out of range for table with {table.data.shape[0]} rows")

    def bk(out):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accumulate(g)

    return _make(table.data[ids].copy(), (table,), bk)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise layer normalization of a 2-D tensor, with learned gain/bias."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D input")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bk(out):
        g = out.grad
        if gain.requires_grad or gain._parents:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad or bias._parents:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad or x._parents:
            gg = g * gain.data
            d = x.data.shape[1]
            dx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).sum(axis=1, keepdims=True) / d)
            x._accumulate(dx)

    return _make(out_data, (x, gain, bias), bk)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """One fused GRU step with gate order (reset, update, candidate):

        gi = x @ w_ih + bias          gh = h @ w_hh
        r  = sigmoid(gi_r + gh_r)     z = sigmoid(gi_z + gh_z)
        n  = tanh(gi_n + r * gh_n)    h' = (1 - z) * n + z * h

    Fusing the cell keeps graphs shallow; the backward closure is the exact
    adjoint of the arithmetic above (covered by the finite-difference suite
    and an elementwise-composition cross-check in the tests).
    """
    d = h.data.shape[1]
    if w_ih.data.shape[1] != 3 * d or w_hh.data.shape != (d, 3 * d) or bias.data.shape != (3 * d,):
        raise ShapeError(
            f"gru_cell parameter shapes inconsistent: h {h.data.shape}, "
            f"w_ih {w_ih.data.shape}, w_hh {w_hh.data.shape}, bias {bias.data.shape}"
        )
    gi = x.data @ w_ih.data + bias.data
    gh = h.data @ w_hh.data
    er = np.exp(-np.abs(gi[:, :d] + gh[:, :d]))
    r = np.where(gi[:, :d] + gh[:, :d] >= 0, 1.0, er) / (1.0 + er)
    ez = np.exp(-np.abs(gi[:, d : 2 * d] + gh[:, d : 2 * d]))
    z = np.where(gi[:, d : 2 * d] + gh[:, d : 2 * d] >= 0, 1.0, ez) / (1.0 + ez)
    n = np.tanh(gi[:, 2 * d :] + r * gh[:, 2 * d :])
    out_data = n + z * (h.data - n)

    def bk(out):
        g = out.grad
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        da_n = dn * (1.0 - n * n)
        dr = da_n * gh[:, 2 * d :]
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dgi = np.concatenate([da_r, da_z, da_n], axis=1)
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
        if x.requires_grad or x._parents:
            x._accumulate(dgi @ w_ih.data.T)
        if w_ih.requires_grad or w_ih._parents:
            w_ih._accumulate(x.data.T @ dgi)
        if bias.requires_grad or bias._parents:
            bias._accumulate(dgi.sum(axis=0))
        if h.requires_grad or h._parents:
            h._accumulate(g * z + dgh @ w_hh.data.T)
        if w_hh.requires_grad or w_hh._parents:
            w_hh._accumulate(h.data.T @ dgh)

    return _make(out_data, (x, h, w_ih, w_hh, bias), bk)


def dropout_mask(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask pre-sampled from `rng`; identity at p=0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def bk(out):
        x._accumulate(out.grad * mask)

    return _make(x.data * mask, (x,), bk)


# -- backward ---------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below `root` (iterative;
    graphs here are deep chains that would overflow the recursion limit)."""
    order: list[Tensor] = []
    seen: set[int] = {id(root)}
    stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of everything `loss` depends on. Accumulates."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
            node.grad = None  # non-leaf: cotangent fully consumed, free it


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- gradient verification ----------------------------------------------------


@dataclass
class FdReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float = 0.0
    tol: float = 1e-4
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < self.tol


def finite_difference_check(
    f,
    params: list[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> FdReport:
    """Compare analytic gradients of the scalar `f()` against central differences.

    `f` must be deterministic and re-evaluable; it is re-run twice per probed
    coordinate with the parameter perturbed in place. When a tensor has more
    coordinates than `max_coords_per_tensor`, a random subset is probed.
    """
    zero_grads(params)
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    report = FdReport(tol=tol)
    with no_grad():
        for t_idx, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n)
            if max_coords_per_tensor is not None and n > max_coords_per_tensor:
                coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
            worst = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                f_plus = f().item()
                flat[c] = orig - eps
                f_minus = f().item()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic[t_idx].reshape(-1)[c]
                denom = max(abs(a), abs(numeric), 1e-6)
                rel = abs(a - numeric) / denom
                worst = max(worst, rel)
            name = p.name or f"param{t_idx}"
            report.per_tensor[name] = max(report.per_tensor.get(name, 0.0), worst)
            report.max_rel_err = max(report.max_rel_err, worst)
    zero_grads(params)
    return report
