"""A small reverse-mode differentiation core over float64 numpy arrays.

Only the primitives the forecasting model needs are provided. Each op builds
a new :class:`Tensor` that remembers its parents and a closure which pushes
the output gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order so each node's closure runs exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NondeterministicGraphError(RuntimeError):
    """Two evaluations of the same graph gave different losses."""


DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data, parents, backward):
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data)
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def absolute(x):
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one weight matrix: a single 2-D product
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if _needs_grad(a) else None
            gb = a2.T @ g2 if _needs_grad(b) else None
            return ga, gb

        return _make((a2 @ b.data).reshape(lead + (b.shape[1],)), (a, b), backward_flat)
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if _needs_grad(a) else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if _needs_grad(b) else None
        return ga, gb

    return _make(out, (a, b), backward)


def sparse_matmul(a, h):
    """``a @ h`` for a constant scipy sparse ``a`` [N x N] and ``h`` [..., N, d]."""
    h = as_tensor(h)
    a = sp.csr_matrix(a)
    if a.shape[1] != h.shape[-2]:
        raise DimensionError(f"sparse operator {a.shape} cannot act on {h.shape}")
    at = a.T.tocsr()

    def apply(m, x):
        # move the node axis first so one sparse product covers the batch
        moved = np.moveaxis(x, -2, 0)
        flat = moved.reshape(moved.shape[0], -1)
        res = (m @ flat).reshape((m.shape[0],) + moved.shape[1:])
        return np.moveaxis(res, 0, -2)

    def backward(g):
        return (apply(at, g),)

    return _make(apply(a, h.data), (h,), backward)


# ---------------------------------------------------------------- row ops

def softmax_rows(x):
    """Softmax over the last axis, shifted by the row maximum."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def l2_normalize_rows(x, eps=1e-12):
    """Divide each row (last axis) by ``max(||row||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(big, g - y * proj, g) / denom,)

    return _make(y, (x,), backward)


def eco_aggregate(e_hat, h, eps=kernels.DEGREE_EPS):
    """Differentiable ``D^-1 E (E^T h)`` with ``D = diag(E (E^T 1))``.

    ``e_hat`` is [N, k]; ``h`` is [N, d] or [B, N, d]. The forward pass goes
    through the compiled kernel; no N x N array is created in either direction.
    """
    e_hat, h = as_tensor(e_hat), as_tensor(h)
    if e_hat.ndim != 2 or h.ndim not in (2, 3) or h.shape[-2] != e_hat.shape[0]:
        raise DimensionError(f"eco_aggregate: embedding {e_hat.shape} vs features {h.shape}")
    out, deg = kernels.eco_aggregate(e_hat.data, h.data, eps, return_degree=True)
    e = e_hat.data
    colsum = e.sum(axis=0)
    active = (e @ colsum) > eps

    def backward(g):
        g3 = g if g.ndim == 3 else g[None]
        n_batch = g3.shape[0]
        # node-major [N, B*d] layout turns every batched product into one GEMM
        gp = kernels.nodes_first(g3) / deg[:, None]
        gm = e.T @ gp  # [k, B*d]
        gh = kernels.batch_first(e @ gm, n_batch)
        ge = None
        if _needs_grad(e_hat):
            hf = kernels.nodes_first(h.data if h.ndim == 3 else h.data[None])
            yf = kernels.nodes_first(out if out.ndim == 3 else out[None])
            m = e.T @ hf
            ge = gp @ m.T + hf @ gm.T
            # degree E (E^T 1), clamped below by eps
            gq = np.where(active, -(gp * yf).sum(axis=1), 0.0)
            ge += np.outer(gq, colsum) + (e.T @ gq)[None, :]
        gh = np.ascontiguousarray(gh)
        return ge, (gh if h.ndim == 3 else gh[0])

    return _make(out, (e_hat, h), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (_unbroadcast(g, old),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, backward)


def take_rows(table, index):
    """Gather rows ``table[index]``; the backward pass scatter-adds."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), backward)


# ---------------------------------------------------------------- reductions

def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(x.data.mean()), (x,), backward)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    abs_errors: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)  # name -> entries compared

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tol_rel):
        return all(err <= tol_rel for err in self.errors.values())


def grad_check(loss_fn, params, *, n_entries=32, step=1e-5, seed=0, abs_floor=1e-6):
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must rebuild the scalar loss from the current values in
    ``params`` (a mapping name -> leaf Tensor). Up to ``n_entries`` random
    entries per parameter are perturbed in place and restored. The relative
    error uses ``max(|analytic|, |numeric|, abs_floor)`` as denominator; the
    floor keeps exactly-zero gradients (common for biases under an absolute
    loss) from turning finite-difference roundoff into a large ratio.
    """
    first = loss_fn()
    if first.data.size != 1:
        raise DimensionError("grad_check needs a scalar loss")
    if loss_fn().data != first.data:
        raise NondeterministicGraphError(
            "loss changes between evaluations; fix stochastic parts (e.g. pass a fixed SSE mask)"
        )
    for p in params.values():
        p.zero_grad()
    first.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > n_entries:
            picks = rng.choice(flat.size, size=n_entries, replace=False)
        worst = worst_abs = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(loss_fn().data)
            flat[idx] = orig - step
            down = float(loss_fn().data)
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[idx])
            diff = abs(a - numeric)
            worst_abs = max(worst_abs, diff)
            worst = max(worst, diff / max(abs(a), abs(numeric), abs_floor))
        report.errors[name] = worst
        report.abs_errors[name] = worst_abs
        report.checked[name] = len(picks)
    return report
