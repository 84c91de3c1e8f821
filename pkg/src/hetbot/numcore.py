"""Dense float64 kernels with reverse-mode gradients, Adam, and a finite-difference checker.

Every differentiable op builds a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``Tensor.backward``
walks the graph in reverse topological order and accumulates into leaf
:class:`Parameter` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable Parameter's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


class Parameter(Tensor):
    """A trainable leaf carrying its own gradient buffer and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=DTYPE, copy=True))
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """2-D matrix product; d/da = g·bᵀ, d/db = aᵀ·g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def take(a: Tensor, key) -> Tensor:
    """Generic numpy indexing; the gradient scatters back to the indexed entries."""
    if isinstance(key, np.ndarray) and key.ndim == 1 and key.dtype.kind in "iu":
        return Tensor(a.data[key], (a,), lambda g: (_segment_sum(g, key, a.shape[0]),))

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], (a,), backward)


def _segment_sum(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    # row-wise out[idx[i]] += values[i]; bincount is a fixed-order C loop
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(DTYPE)
    width = int(np.prod(values.shape[1:]))
    flat = (idx[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(flat, weights=values.reshape(-1), minlength=n * width)
    return out.reshape((n,) + values.shape[1:])


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    z = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope)
    return Tensor(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    pos = (x.data > 0).astype(DTYPE)
    return Tensor(x.data * pos, (x,), lambda g: (g * pos,))


def elementwise(kind: str, x: Tensor, slope: float = 0.01) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  ``rng=None`` or ``p == 0`` is the identity."""
    if rng is None or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# softmax / losses
# ---------------------------------------------------------------------------

def _softmax(d: np.ndarray) -> np.ndarray:
    e = np.exp(d - d.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor(y, (x,), backward)


def cross_entropy_logits(logits: Tensor, labels, mask) -> Tensor:
    """Mean of -log softmax(logits)[label] over the rows in ``mask``.

    ``mask`` is either a boolean vector over rows or an array of row ids.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if rows.size == 0:
        raise ValueError("no supervised nodes")
    n_rows, n_cls = logits.shape
    if rows.max() >= n_rows:
        raise IndexError(f"mask row {rows.max()} out of range for {n_rows} rows")
    y = labels[rows]
    if y.min() < 0 or y.max() >= n_cls:
        raise ValueError(f"labels must lie in [0, {n_cls})")

    z = logits.data[rows]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(rows.size), y]))

    def backward(g):
        p = _softmax(z)
        p[np.arange(rows.size), y] -= 1.0
        out = np.zeros_like(logits.data)
        np.add.at(out, rows, p * (g / rows.size))
        return (out,)

    return Tensor(loss, (logits,), backward)


def sum_squares(params: Iterable[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = add(total, Tensor(float(np.sum(p.data * p.data)), (p,),
                                  lambda g, p=p: (2.0 * g * p.data,)))
    return total


# ---------------------------------------------------------------------------
# segment ops
# ---------------------------------------------------------------------------

def _check_index(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for {n} rows")
    return idx


def gather(x: Tensor, idx) -> Tensor:
    idx = _check_index(idx, x.shape[0])
    return take(x, idx)


def scatter_sum(x: Tensor, idx, num_segments: int) -> Tensor:
    """``out[idx[i]] += x[i]``; segments with no entries stay zero."""
    idx = _check_index(idx, num_segments)
    if idx.shape[0] != x.shape[0]:
        raise DimensionError(f"index length {idx.shape[0]} does not match {x.shape[0]} rows")
    return Tensor(_segment_sum(x.data, idx, num_segments), (x,), lambda g: (g[idx],))


def edge_aggregate(m: Tensor, coef: Tensor, src, dst, num_nodes: int) -> Tensor:
    """Per-head weighted neighbor sum in one sparse pass.

    ``m`` is N x D split into ``K = coef.shape[1]`` equal column blocks;
    ``out[dst_e, block_k] += coef[e, k] * m[src_e, block_k]``.  Equivalent to
    gather -> scale -> scatter_sum but without materialising E x D messages
    in the forward pass.
    """
    src = _check_index(src, m.shape[0])
    dst = _check_index(dst, num_nodes)
    n_edges, heads = coef.shape
    if len(src) != n_edges or len(dst) != n_edges:
        raise DimensionError(f"edge lists of length {len(src)}/{len(dst)} vs coef {coef.shape}")
    D = m.shape[1]
    if D % heads:
        raise DimensionError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    mats = [sp.csr_matrix((coef.data[:, k], (dst, src)), shape=(num_nodes, m.shape[0]))
            for k in range(heads)]
    out = np.empty((num_nodes, D), dtype=DTYPE)
    for k, A in enumerate(mats):
        out[:, k * dh:(k + 1) * dh] = A @ m.data[:, k * dh:(k + 1) * dh]

    def backward(g):
        gm = np.empty_like(m.data)
        for k, A in enumerate(mats):
            gm[:, k * dh:(k + 1) * dh] = A.T @ g[:, k * dh:(k + 1) * dh]
        prod = g[dst].reshape(n_edges, heads, dh) * m.data[src].reshape(n_edges, heads, dh)
        return gm, prod.sum(axis=2)

    return Tensor(out, (m, coef), backward)


# ---------------------------------------------------------------------------
# initialisation / optimisation
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape: tuple, name: str = "") -> Parameter:
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], 1)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape), name=name)


def zeros(shape: tuple, name: str = "") -> Parameter:
    return Parameter(np.zeros(shape), name=name)


def adam_step(p: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Parameter:
    p.step_count += 1
    p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
    p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * p.grad * p.grad
    m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
    v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
    p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple

    def as_dict(self) -> dict:
        return {"max_rel_err": self.max_rel_err, "worst_param": self.worst_param,
                "worst_index": list(self.worst_index)}


def grad_check(loss_fn: Callable[[], Tensor], params, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences on every entry.

    ``loss_fn`` must rebuild the graph on each call and be deterministic.
    ``params`` is a sequence of Parameters or a name -> Parameter mapping.
    Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    worst = GradCheckReport(0.0, named[0][0] if named else "", ())
    for name, p in named:
        for index in np.ndindex(p.shape):
            orig = p.data[index]
            p.data[index] = orig + step
            up = loss_fn().item()
            p.data[index] = orig - step
            down = loss_fn().item()
            p.data[index] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"loss is not finite when perturbing {name}{index}")
            num = (up - down) / (2.0 * step)
            a = analytic[name][index]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst.max_rel_err:
                worst = GradCheckReport(float(err), name, tuple(int(i) for i in index))
    for _, p in named:
        p.zero_grad()
    return worst
