"""Differentiable primitives over :class:`~agg.numerics.tensor.Tensor`.

Each function computes its result with numpy and, when a tape is active,
records a vector-Jacobian product closure. Binary elementwise ops follow
numpy broadcasting; their gradients are summed back to the input shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from agg.errors import ConfigurationError, InvalidMaskError
from agg.numerics.tensor import Tensor, record

LEAKY_SLOPE = 0.01
LAYER_NORM_EPS = 1e-5


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.value + b.value)
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                             _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.value - b.value)
    return record("sub", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                             _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.value * b.value)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.value, b.shape) if b.requires_grad else None))


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value * a.value)
    return record("square", out, (a,), lambda g: (2.0 * a.value * g,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sin(a.value))
    return record("sin", out, (a,), lambda g: (g * np.cos(a.value),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.value))
    return record("exp", out, (a,), lambda g: (g * out.value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.value))
    return record("log", out, (a,), lambda g: (g / a.value,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)
    return record("sigmoid", out, (a,), lambda g: (g * s * (1.0 - s),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.value, lo, hi))
    inside = (a.value >= lo) & (a.value <= hi)
    return record("clip", out, (a,), lambda g: (g * inside,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.value > 0, 1.0, slope)
    out = Tensor(a.value * scale)
    return record("leaky_relu", out, (a,), lambda g: (g * scale,))


# reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = Tensor(np.sum(a.value, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.reshape(shape))
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def swap_last(a) -> Tensor:
    """Transpose the two trailing axes."""
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.value, -1, -2))
    return record("swap_last", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.value, axes))
    return record("permute", out, (a,), lambda g: (np.transpose(g, inv),))


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; covers row slices and table lookups.

    Repeated indices accumulate their gradients.
    """
    a = as_tensor(a)
    out = Tensor(a.value[key])

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return record("index", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ConfigurationError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ConfigurationError(
                f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {axis}")
    out = Tensor(np.concatenate([t.value for t in ts], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        parts = []
        for i in range(len(ts)):
            sl = [slice(None)] * nd
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return parts

    return record("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ConfigurationError(f"stack: shapes {sorted(shapes)} do not conform")
    out = Tensor(np.stack([t.value for t in ts], axis=axis))
    return record("stack", out, ts,
                  lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))])


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the two trailing axes, broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ConfigurationError(f"matmul: batch shapes {a.shape} and {b.shape} do not conform") from None
    out = Tensor(a.value @ b.value)

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            av = a.value
            if b.ndim == 2:
                # shared weight matrix: fold every batch axis into one contraction
                av = np.broadcast_to(av, g.shape[:-1] + av.shape[-1:])
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape), gb)

    return record("matmul", out, (a, b), vjp)


# normalisation and attention --------------------------------------------

def softmax_rows(m, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) and ``-inf`` entries in the
    input are both treated as excluded positions and map to exactly 0.
    """
    m = as_tensor(m)
    x = m.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    excluded = np.isneginf(x)
    if np.any(np.all(excluded, axis=-1)):
        raise InvalidMaskError("softmax_rows: a row has every entry masked")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return record("softmax_rows", out, (m,), vjp)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each last-axis slice, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigurationError(
            f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.value * xhat + beta.value)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return record("layer_norm", out, (x, gamma, beta), vjp)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so the expectation is unchanged."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout: rate must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout: training mode needs an rng")
    scale = np.where(rng.random(x.shape, dtype=np.float32) >= p, 1.0 / (1.0 - p), 0.0)
    scale = scale.astype(x.dtype, copy=False)
    out = Tensor(x.value * scale)
    return record("dropout", out, (x,), lambda g: (g * scale,))
