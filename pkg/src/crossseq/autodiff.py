"""Dense tensors with tape-based reverse-mode automatic differentiation.

numpy supplies the raw array arithmetic; this module adds the tape, the
backward rules, the masking and gradient-manipulation primitives the encoder
stack needs (masked softmax, gradient reversal, stop-gradient), Gaussian
KL / reparameterization helpers, and a finite-difference gradient checker.

Tensors are treated as immutable once created inside a step: ops allocate
fresh arrays and never write through their inputs. A graph lives for one
forward/backward pass and is dropped afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class InvalidMaskError(ValueError):
    """A selection mask leaves nothing selected."""


class ValidationError(ValueError):
    """An input violates an op precondition (e.g. not on the simplex)."""


class NumericsError(FloatingPointError):
    """Non-finite values detected at an op boundary (debug mode only)."""


_DEFAULT_DTYPE = np.float64
_DEBUG_CHECKS = False
_GRAD_ENABLED = True

LOG_EPS = 1e-12      # floor inside logarithms
NORM_EPS = 1e-8      # layer-norm denominator floor


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float64 or float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op raises NumericsError on NaN/Inf outputs."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the context (e.g. prior estimation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus an optional position on the backward tape.

    ``values`` is a numpy array, ``grad`` accumulates the adjoint after
    ``backward()``. Non-leaf tensors keep references to their parents and a
    closure mapping the upstream gradient to per-parent gradients.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse sweep from this tensor, accumulating into ``.grad``."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.values.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.values)
        else:
            grad = np.asarray(grad, dtype=self.values.dtype)
            if grad.shape != self.values.shape:
                raise ShapeError("upstream gradient shape mismatch")

        # Iterative reverse-topological order; each node visited exactly once.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += pgrad

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; use dedicated primitives")
        return multiply(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def parameter(values, dtype=None) -> Tensor:
    """A leaf tensor that participates in gradient accumulation."""
    arr = np.asarray(values, dtype=dtype or _DEFAULT_DTYPE)
    t = Tensor(arr, requires_grad=True)
    return t


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(values)):
        raise NumericsError(f"non-finite values out of op {op!r}")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    values = a.values + b.values

    def backward(g):
        return (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape))

    return _node(values, (a, b), backward, "add")


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    values = a.values * b.values

    def backward(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _node(values, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.values.shape} @ {b.values.shape}"
        )
    values = np.matmul(a.values, b.values)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        if ga.shape != a.values.shape:
            ga = _unbroadcast(ga, a.values.shape)
        if gb.shape != b.values.shape:
            gb = _unbroadcast(gb, b.values.shape)
        return (ga, gb)

    return _node(values, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    values = np.maximum(x.values, 0.0)

    def backward(g):
        return (g * (x.values > 0.0),)

    return _node(values, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_values(x.values)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), backward, "sigmoid")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x); backward is sigma(x) + x*sigma(x)*(1-sigma(x))."""
    x = _as_tensor(x)
    s = _sigmoid_values(x.values)
    values = x.values * s

    def backward(g):
        return (g * (s + x.values * s * (1.0 - s)),)

    return _node(values, (x,), backward, "swish")


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    values = np.exp(x.values)

    def backward(g):
        return (g * values,)

    return _node(values, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    values = np.log(x.values)

    def backward(g):
        return (g / x.values,)

    return _node(values, (x,), backward, "log")


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    values = np.maximum(x.values, floor)

    def backward(g):
        return (g * (x.values > floor),)

    return _node(values, (x,), backward, "clip_min")


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    values = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(x.values.shape),)

    return _node(values, (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    values = np.transpose(x.values, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(values, (x,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    values = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.values.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return grads

    return _node(values, tuple(ts), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    values = x.values[idx].copy()

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[idx] = g
        return (gx,)

    return _node(values, (x,), backward, "narrow")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with a scatter-add backward into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise IndexError("gather_rows: id out of range")
    values = table.values[ids]

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(values, (table,), backward, "gather_rows")


def select_positions(x: Tensor, index: tuple[np.ndarray, ...]) -> Tensor:
    """Advanced-index the leading axes with integer arrays (scatter-add backward)."""
    x = _as_tensor(x)
    values = x.values[index]

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(values, (x,), backward, "select_positions")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    values = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.values.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.values.shape).copy(),)

    return _node(values, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    values = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.values.size if axis is None else x.values.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.values.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, x.values.shape).copy(),)

    return _node(values, (x,), backward, "mean")


# ---------------------------------------------------------------------------
# normalization and softmaxes
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    values = y * gain.values + bias.values

    def backward(g):
        ggain = _unbroadcast(g * y, gain.values.shape)
        gbias = _unbroadcast(g, bias.values.shape)
        gy = g * gain.values
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - y * (gy * y).mean(axis=-1, keepdims=True)
        )
        return (gx, ggain, gbias)

    return _node(values, (x, gain, bias), backward, "layer_norm")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.values.max(axis=axis, keepdims=True)
    shifted = x.values - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    values = shifted - lse

    def backward(g):
        softmax = np.exp(values)
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return _node(values, (x,), backward, "log_softmax")


def masked_softmax(scores: Tensor, mask, allow_empty: bool = False) -> Tensor:
    """Softmax over the last axis restricted to mask==1 entries.

    Masked entries get probability exactly zero and receive exactly zero
    score gradient. Stabilized by subtracting the max over unmasked entries.
    Rows whose mask is all zero raise InvalidMaskError unless ``allow_empty``
    is set, in which case they come out as all-zero rows (used for attention
    rows whose causal window contains only padding).
    """
    scores = _as_tensor(scores)
    mask_arr = np.asarray(mask.values if isinstance(mask, Tensor) else mask).astype(bool)
    mask_b = np.broadcast_to(mask_arr, scores.values.shape)
    any_valid = mask_b.any(axis=-1, keepdims=True)
    if not allow_empty and not any_valid.all():
        raise InvalidMaskError("masked_softmax: a row has no unmasked entry")

    m = np.max(scores.values, axis=-1, keepdims=True, initial=-np.inf, where=mask_b)
    m = np.where(any_valid, m, 0.0)
    z = np.where(mask_b, scores.values - m, 0.0)
    e = np.where(mask_b, np.exp(z), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(any_valid, denom, 1.0)
    p = e / denom

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (scores,), backward, "masked_softmax")


# ---------------------------------------------------------------------------
# stochastic and sequence helpers
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None,
            train: bool = True) -> Tensor:
    """Inverted dropout; identity at eval time or rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.values.shape) >= rate) / (1.0 - rate)
    return multiply(x, keep.astype(x.values.dtype))


def prefix_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Causal mean over the valid prefix: out[t] = mean(x[s] for s<=t, valid[s]).

    Positions with an empty valid prefix come out zero.
    """
    x = _as_tensor(x)
    v = np.asarray(valid).astype(x.values.dtype)
    while v.ndim < x.values.ndim:
        v = v[..., None]
    csum = np.cumsum(x.values * v, axis=-2)
    cnt = np.cumsum(v, axis=-2)
    cnt_safe = np.maximum(cnt, 1.0)
    values = csum / cnt_safe

    def backward(g):
        rev = g / cnt_safe
        tail = np.flip(np.cumsum(np.flip(rev, axis=-2), axis=-2), axis=-2)
        return (tail * v,)

    return _node(values, (x,), backward, "prefix_mean")


# ---------------------------------------------------------------------------
# gradient manipulation
# ---------------------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes zero gradient to x."""
    x = _as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.values = x.values
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    return out


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0:
        raise ValidationError(f"grad_reverse needs lam >= 0, got {lam}")
    x = _as_tensor(x)

    def backward(g):
        return ((-lam) * g,)

    return _node(x.values, (x,), backward, "grad_reverse")


# ---------------------------------------------------------------------------
# divergences and sampling
# ---------------------------------------------------------------------------


def _check_simplex(values: np.ndarray, name: str) -> None:
    sums = values.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValidationError(f"kl_categorical: {name} rows must sum to 1")
    if values.min() < -1e-9:
        raise ValidationError(f"kl_categorical: {name} has negative entries")


def kl_categorical(p, q) -> Tensor:
    """KL(p || q) over the last axis for simplex-valued rows.

    Entries are floored at 1e-12 inside the logs; exact zeros in p are fine
    (0 * log 0 contributes nothing).
    """
    p, q = _as_tensor(p), _as_tensor(q)
    _check_simplex(p.values, "p")
    _check_simplex(q.values, "q")
    lp = log(clip_min(p, LOG_EPS))
    lq = log(clip_min(q, LOG_EPS))
    return reduce_sum(multiply(p, add(lp, multiply(lq, -1.0))), axis=-1)


def kl_diag_gaussian_to_std(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) over the last axis."""
    mu, log_var = _as_tensor(mu), _as_tensor(log_var)
    var = exp(log_var)
    inner = add(add(multiply(mu, mu), var), add(multiply(log_var, -1.0), -1.0))
    return multiply(reduce_sum(inner, axis=-1), 0.5)


def reparameterize(mu: Tensor, log_var: Tensor,
                   rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """mu + exp(0.5 * log_var) * eps with eps ~ N(0, I).

    ``eps`` can be supplied explicitly (test hook / frozen-noise checks);
    gradient flows to mu and log_var, never to eps.
    """
    mu, log_var = _as_tensor(mu), _as_tensor(log_var)
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs an rng when eps is not given")
        eps = rng.standard_normal(mu.values.shape)
    eps = np.asarray(eps, dtype=mu.values.dtype)
    std = exp(multiply(log_var, 0.5))
    return add(mu, multiply(std, eps))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare autodiff gradients of scalar f against central differences.

    Returns the max relative error over coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8). A constant f reports 0.
    """
    x.grad = None
    out = f(x)
    if out.values.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    if out.requires_grad:
        out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.values)

    flat = x.values.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).values.reshape(()))
        flat[i] = orig - h
        fm = float(f(x).values.reshape(()))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
