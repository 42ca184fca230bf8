"""Differentiable operations over :class:`Tensor`.

Every function returns a fresh Tensor wired into the graph. Broadcasting
follows numpy semantics; backward passes reduce gradients back to the
operand shapes.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from ..errors import DimensionError
from .tensor import Tensor, as_tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), vjp, validate=False)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), vjp, validate=False)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), vjp, validate=False)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out, (a, b), vjp, validate=False)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,), validate=False)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent."""
    a = as_tensor(a)
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor(out, (a,), vjp, validate=False)


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), validate=False)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,), validate=False)


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,), validate=False)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,), validate=False)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return Tensor(out, (a,), vjp, validate=False)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, (a,), lambda g: (g * special.expit(a.data),), validate=False)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), vjp, validate=False)


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            expand = list(out.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), vjp, validate=False)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            expand = list(out.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor(out, (a,), vjp, validate=False)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.shape),), validate=False)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor(out, (a,), lambda g: (g.transpose(inverse),), validate=False)


def softmax(a, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis`; outputs sum to one along it."""
    a = as_tensor(a)
    _normalize_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (a,), vjp, validate=False)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _normalize_axis(axis, a.ndim)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, (a,), vjp, validate=False)


def layer_norm(a, gain, bias, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance over the last axis (population variance),
    then elementwise affine with gain and bias."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({width},), "
            f"got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * normed).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        gy = g * gain.data
        ga = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - normed * (gy * normed).mean(axis=-1, keepdims=True))
        return ga, ggain, gbias

    return Tensor(out, (a, gain, bias), vjp, validate=False)


def gather(table, indices) -> Tensor:
    """Row lookup table[indices]; backward scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"gather table must be rank 2, got {table.shape}")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("gather index out of range")
    out = table.data[idx]

    def vjp(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (acc,)

    return Tensor(out, (table,), vjp, validate=False)


def stop_gradient(a) -> Tensor:
    """Identity forward, zero gradient backward (detached constant)."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), validate=False)


def straight_through(carrier, values) -> Tensor:
    """Forward the data of `values`; route the incoming gradient, unchanged,
    to `carrier`. `values` receives no gradient through this op."""
    carrier, values = as_tensor(carrier), as_tensor(values)
    if carrier.shape != values.shape:
        raise DimensionError(
            f"straight_through shapes disagree: {carrier.shape} vs {values.shape}")
    return Tensor(values.data.copy(), (carrier,), lambda g: (g,), validate=False)


def dropout(a, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    keep = rng.uniform(0.0, 1.0, a.shape) >= rate
    scale = keep / (1.0 - rate)
    return Tensor(a.data * scale, (a,), lambda g: (g * scale,), validate=False)


def _wrap_binary(fn):
    def left(self, other):
        return fn(self, other)

    def right(self, other):
        return fn(other, self)

    return left, right


Tensor.__add__, Tensor.__radd__ = _wrap_binary(add)
Tensor.__sub__, Tensor.__rsub__ = _wrap_binary(sub)
Tensor.__mul__, Tensor.__rmul__ = _wrap_binary(mul)
Tensor.__truediv__, Tensor.__rtruediv__ = _wrap_binary(div)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = neg
Tensor.__pow__ = power
