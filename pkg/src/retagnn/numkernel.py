"""Dense reverse-mode differentiation kernel and Adam.

Every learnable computation in the model is built from the ops below. A
``Tensor`` wraps a numpy array; ops record a closure that pushes the output
gradient back to their inputs, and :func:`backward` replays those closures in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised on misuse of :func:`backward`."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


_DTYPE = [np.float64]
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the backward graph."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE[0] = np.float64 if bits == 64 else np.float32


def default_dtype():
    return _DTYPE[0]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _make(value, parents, backward) -> Tensor:
    parents = tuple(parents)
    if not _GRAD_ENABLED[0] or not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=parents, _backward=backward)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.value > 0, 1.0, slope).astype(a.value.dtype)
    return _make(a.value * factor, (a,), lambda g: _accumulate(a, g * factor))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(a))``."""
    a = as_tensor(a)
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(np.minimum(-x, 0.0)) / (1.0 + np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: _accumulate(a, g * sig_neg))


# -- reductions ----------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), back)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")

    def back(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _make(np.dot(a.value, b.value), (a, b), back)


def frobenius_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sum(a.value * a.value), (a,), lambda g: _accumulate(a, 2.0 * g * a.value))


# -- linear algebra and shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics for 2-D @ 2-D and batched 3-D @ {2-D, 3-D}."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.value, b.value), (a, b), back)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,),
                 lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.value for t in tensors], axis=ax), tensors, back)


def gather_rows(a, index) -> Tensor:
    """Rows of ``a`` selected by ``index`` (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.value)
        if index.ndim == 1 and a.ndim == 2:
            _scatter_rows(full, index, g)
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.value[index], (a,), back)


def _scatter_rows(full: np.ndarray, index: np.ndarray, g: np.ndarray) -> None:
    n = full.shape[0]
    m = sp.csr_matrix((np.ones(len(index), dtype=g.dtype), (index, np.arange(len(index)))),
                      shape=(n, len(index)))
    full += m @ g


# -- attention -----------------------------------------------------------------

def softmax_with_mask(a, mask=None) -> Tensor:
    """Row softmax over the last axis of ``a + mask``.

    ``mask`` holds 0 or -inf. Rows that are fully masked come out as zeros.
    """
    a = as_tensor(a)
    logits = a.value if mask is None else a.value + mask
    if mask is not None and np.broadcast_shapes(a.shape, np.shape(mask)) != a.shape:
        raise ShapeError(f"softmax_with_mask: mask shape {np.shape(mask)} vs {a.shape}")
    m = np.max(logits, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.where(dead, 0.0, e / np.where(dead, 1.0, s))

    def back(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _make(out, (a,), back)


def segment_softmax(a, indptr) -> Tensor:
    """Softmax of a 1-D tensor within contiguous segments given by ``indptr``.

    Empty segments are allowed and produce nothing.
    """
    a = as_tensor(a)
    indptr = np.asarray(indptr)
    x = a.value
    if x.ndim != 1 or indptr[-1] != x.shape[0]:
        raise ShapeError(f"segment_softmax: values {x.shape} vs segment end {indptr[-1]}")
    counts = np.diff(indptr)
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = indptr[:-1][counts > 0]
    segmax = np.zeros(len(counts), dtype=x.dtype)
    if len(starts):
        segmax[counts > 0] = np.maximum.reduceat(x, starts)
    e = np.exp(x - segmax[seg])
    denom = np.bincount(seg, weights=e, minlength=len(counts))
    out = e / denom[seg]

    def back(g):
        inner = np.bincount(seg, weights=g * out, minlength=len(counts))
        _accumulate(a, out * (g - inner[seg]))

    return _make(out, (a,), back)


def edge_aggregate(weights, source, indptr, indices) -> Tensor:
    """``out[i] = sum_e weights[e] * source[indices[e]]`` over edges e of row i.

    Edges are grouped by output row via CSR ``indptr``/``indices``.
    """
    weights, source = as_tensor(weights), as_tensor(source)
    indptr = np.asarray(indptr)
    indices = np.asarray(indices)
    n_out = len(indptr) - 1
    if weights.ndim != 1 or weights.shape[0] != len(indices):
        raise ShapeError(f"edge_aggregate: weights {weights.shape} vs {len(indices)} edges")
    mat = sp.csr_matrix((weights.value, indices, indptr), shape=(n_out, source.shape[0]))
    out = mat @ source.value

    def back(g):
        if source.requires_grad:
            _accumulate(source, mat.T @ g)
        if weights.requires_grad:
            rows = np.repeat(np.arange(n_out), np.diff(indptr))
            _accumulate(weights, np.einsum("ij,ij->i", g[rows], source.value[indices]))

    return _make(out, (weights, source), back)


# -- differentiation -----------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor ``loss`` depends on.

    Leaf gradients accumulate into existing ``.grad`` buffers. A graph can only
    be differentiated once; intermediate closures are released afterwards.
    """
    if loss.value.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward already called on this graph; rebuild it first")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        if node.grad is not None:
            node._backward(node.grad)
        # intermediates do not keep gradients or closures
        node.grad = None
        node._backward = None
        node._parents = ()
        node._consumed = True


# -- optimizer -----------------------------------------------------------------

class AdamState:
    """Adam with bias correction over a name -> Tensor mapping."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict | None = None) -> None:
        """One update. ``grads`` defaults to each tensor's ``.grad``."""
        if grads is None:
            grads = {k: p.grad for k, p in params.items()}
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            value = p.value if isinstance(p, Tensor) else p
            if g.shape != value.shape:
                raise ShapeError(f"adam: gradient {g.shape} vs parameter {value.shape} for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    state.step(params, grads)
    return params


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())
