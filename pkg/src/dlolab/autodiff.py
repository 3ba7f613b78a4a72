"""Small reverse-mode autodiff over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Usage::

    with Tape() as tape:
        loss = mean_squared_error(matmul(x, w), y)
    (gw,) = tape.backward(loss, [w])

Broadcasting is deliberately limited to adding a bias vector to every row of
a matrix.  Parameters default to float32; :func:`grad_check` recomputes in
float64.
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operation nodes in execution order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        """Gradients of scalar ``loss`` wrt ``params`` (zeros for unused ones).

        Leaf gradients are also stored on ``tensor.grad``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if params is None:
            return grads
        result = []
        for p in params:
            g = grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
            p.grad = g
            result.append(g)
        return result


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]):
    return tape.backward(loss, params)


def _op(data, inputs, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        stack = _tape_stack()
        if stack:
            stack[-1].record(out, inputs, backward_fn)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _op(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _op(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _op(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: cannot combine {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _op(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _op(a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in tensors]
    try:
        data = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(data, tuple(tensors), bw)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    data = a.data[key]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _op(np.array(data), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _op(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _op(y, (a,), lambda g: (g * y * (1.0 - y),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = x < 0
    em1 = np.expm1(np.minimum(x, 0))
    y = np.where(neg, em1, x)
    return _op(y, (a,), lambda g: (g * np.where(neg, em1 + 1.0, 1.0).astype(x.dtype, copy=False),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(x.dtype.type(0), x)
    return _op(y, (a,), lambda g: (g * _sigmoid(x),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _op(y, (a,), lambda g: (g * y,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    data = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(np.asarray(data), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_(a), 1.0 / a.data.size)


def mean_squared_error(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape(pred, target, "mean_squared_error")
    diff = pred.data - target.data
    n = diff.dtype.type(diff.size)
    value = np.asarray(np.sum(diff * diff) / n)
    return _op(value, (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def floor_at(a, c: float) -> Tensor:
    """``max(a, c)`` elementwise; no gradient where the floor is active."""
    a = as_tensor(a)
    active = a.data < c
    y = np.where(active, a.data.dtype.type(c), a.data)
    return _op(y, (a,), lambda g: (np.where(active, 0.0, g).astype(g.dtype, copy=False),))


def embedding_lookup(table, index) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _op(table.data[idx], (table,), bw)


# ----------------------------------------------------------- composite pieces


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


class GRUWeights(NamedTuple):
    """Row-vector convention: gates read ``[x, h] @ W``."""

    w_ru: Tensor  # (dx + dh, 2 dh): reset and update gates side by side
    b_ru: Tensor  # (2 dh,)
    w_n: Tensor  # (dx + dh, dh)
    b_n: Tensor  # (dh,)


def gru_cell(x, h, weights: GRUWeights) -> Tensor:
    x, h = as_tensor(x), as_tensor(h)
    dh = h.shape[-1]
    if weights.w_ru.shape != (x.shape[-1] + dh, 2 * dh) or weights.w_n.shape != (x.shape[-1] + dh, dh):
        raise ShapeError(
            f"gru_cell: weights {weights.w_ru.shape}/{weights.w_n.shape} do not fit x {x.shape}, h {h.shape}"
        )
    squeeze = x.data.ndim == 1
    if squeeze:
        x, h = reshape(x, (1, -1)), reshape(h, (1, -1))
    gates = sigmoid(linear(concat([x, h]), weights.w_ru, weights.b_ru))
    r = gates[:, :dh]
    u = gates[:, dh:]
    n = tanh(linear(concat([x, mul(r, h)]), weights.w_n, weights.b_n))
    out = add(n, mul(u, sub(h, n)))
    return reshape(out, (dh,)) if squeeze else out


def gaussian_kl(mu1, sigma1, mu2, sigma2) -> Tensor:
    """KL(N(mu1, sigma1) || N(mu2, sigma2)) summed over the last axis."""
    mu1, sigma1, mu2, sigma2 = (as_tensor(t) for t in (mu1, sigma1, mu2, sigma2))
    for t in (sigma1, mu2, sigma2):
        _same_shape(mu1, t, "gaussian_kl")
    m1, s1, m2, s2 = mu1.data, sigma1.data, mu2.data, sigma2.data
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise DomainError("gaussian_kl needs strictly positive standard deviations")
    diff = m1 - m2
    var2 = s2 * s2
    terms = np.log(s2 / s1) + (s1 * s1 + diff * diff) / (2.0 * var2) - 0.5
    value = np.asarray(np.sum(terms, axis=-1))

    def bw(g):
        g = np.expand_dims(g, -1)
        return (
            g * diff / var2,
            g * (s1 / var2 - 1.0 / s1),
            -g * diff / var2,
            g * (1.0 / s2 - (s1 * s1 + diff * diff) / (var2 * s2)),
        )

    return _op(value, (mu1, sigma1, mu2, sigma2), bw)


def reparameterize(mu, sigma, noise) -> Tensor:
    """``mu + sigma * noise``; the noise is treated as a constant."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    noise = Tensor(np.asarray(noise, dtype=mu.data.dtype))
    _same_shape(mu, sigma, "reparameterize")
    _same_shape(mu, noise, "reparameterize")
    return add(mu, mul(sigma, noise))


# ------------------------------------------------------------------ optimizer


def adam_step(params, grads, moments, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are lists of arrays, ``moments`` a list of
    ``(m, v)`` pairs.  Returns new ``(params, moments)``; inputs are not
    modified.
    """
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    new_params, new_moments = [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, (m, v) in zip(params, grads, moments):
        if p.shape != g.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: inconsistent shapes {p.shape}, {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - step).astype(p.dtype, copy=False))
        new_moments.append((m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)))
    return new_params, new_moments


class Adam:
    """Stateful wrapper around :func:`adam_step` that updates tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, grads):
        self.t += 1
        values, self.moments = adam_step(
            [p.data for p in self.params], grads, self.moments, self.t, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, v in zip(self.params, values):
            p.data = v

    def state(self):
        return {"t": self.t, "moments": self.moments}


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return [g * g.dtype.type(factor) for g in grads], total


# --------------------------------------------------------------- grad checker


class GradCheck(NamedTuple):
    max_rel_error: float
    ok: bool


def grad_check(
    function: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence,
    h: float = 1e-3,
    tolerance: float = 1e-4,
) -> GradCheck:
    """Compare analytic gradients with central differences, all in float64.

    ``function`` receives the list of (float64) parameter tensors and must
    return a scalar tensor.  Relative error per element uses the denominator
    ``max(|a|, |b|, 1e-6)``.
    """
    params64 = [Tensor(np.array(as_tensor(p).data, dtype=np.float64), requires_grad=True) for p in params]
    with Tape() as tape:
        loss = function(params64)
    analytic = tape.backward(loss, params64)

    worst = 0.0
    for p, a in zip(params64, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(function(params64).data)
            flat[i] = orig - h
            fm = float(function(params64).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return GradCheck(worst, worst < tolerance)
