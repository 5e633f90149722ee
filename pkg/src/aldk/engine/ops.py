"""Differentiable elementwise, reduction and shape ops.

Backward rules only use ops from this module (or conv ops that are marked
accordingly), which is what makes second derivatives available.
"""

from __future__ import annotations

import numpy as np

from .tensor import EngineError, Tensor, as_tensor, compute_dtype, make_node


def _sum_to_shape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return x if x.shape == shape else sum_to(x, shape)


# -- shape plumbing ---------------------------------------------------------

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (inverse of broadcast_to)."""
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, dtype=np.float64, keepdims=True)
    data = data.reshape(shape).astype(compute_dtype())

    def bw(g, inputs, out, needs):
        return (broadcast_to(g, inputs[0].shape),)

    return make_node(data, (x,), "sum_to", bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape).copy()

    def bw(g, inputs, out, needs):
        return (sum_to(g, inputs[0].shape),)

    return make_node(data, (x,), "broadcast_to", bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def bw(g, inputs, out, needs):
        return (reshape(g, inputs[0].shape),)

    return make_node(data, (x,), "reshape", bw)


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise EngineError(f"concat extent mismatch: {[t.shape for t in tensors]} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, inputs, out, needs):
        return tuple(
            take(g, axis, int(lo), int(hi)) if need else None
            for lo, hi, need in zip(bounds[:-1], bounds[1:], needs)
        )

    return make_node(data, tensors, "concat", bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation of two [N,C,D,H,W] (or [C,D,H,W]) tensors."""
    if a.ndim != b.ndim or a.shape[-3:] != b.shape[-3:] or a.shape[:-4] != b.shape[:-4]:
        raise EngineError(f"concat_channels: spatial extents differ {a.shape} vs {b.shape}")
    return concat([a, b], axis=a.ndim - 4)


def take(x: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo, hi) along one axis."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(lo, hi)
    data = x.data[tuple(index)]

    def bw(g, inputs, out, needs):
        full = inputs[0].shape
        parts = []
        if lo > 0:
            parts.append(Tensor(np.zeros(full[:axis] + (lo,) + full[axis + 1:], compute_dtype())))
        parts.append(g)
        if hi < full[axis]:
            parts.append(Tensor(np.zeros(full[:axis] + (full[axis] - hi,) + full[axis + 1:], compute_dtype())))
        return (concat(parts, axis=axis) if len(parts) > 1 else g,)

    return make_node(data, (x,), "take", bw)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g, inputs, out, needs):
        return (_sum_to_shape(g, inputs[0].shape) if needs[0] else None,
                _sum_to_shape(g, inputs[1].shape) if needs[1] else None)

    return make_node(data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g, inputs, out, needs):
        return (_sum_to_shape(g, inputs[0].shape) if needs[0] else None,
                _sum_to_shape(neg(g), inputs[1].shape) if needs[1] else None)

    return make_node(data, (a, b), "sub", bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, inputs, out, needs):
        return (neg(g),)

    return make_node(-a.data, (a,), "neg", bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(as_tensor(a), float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g, inputs, out, needs):
        x, y = inputs
        return (_sum_to_shape(mul(g, y), x.shape) if needs[0] else None,
                _sum_to_shape(mul(g, x), y.shape) if needs[1] else None)

    return make_node(data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    data = (a.data * compute_dtype()(c)).astype(compute_dtype())

    def bw(g, inputs, out, needs):
        return (scale(g, c),)

    return make_node(data, (a,), "scale", bw)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(as_tensor(a), 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g, inputs, out, needs):
        x, y = inputs
        gx = _sum_to_shape(div(g, y), x.shape) if needs[0] else None
        gy = _sum_to_shape(neg(div(mul(g, out), y)), y.shape) if needs[1] else None
        return gx, gy

    return make_node(data, (a, b), "div", bw)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g, inputs, out, needs):
        return (div(scale(g, 0.5), out),)

    return make_node(data, (a,), "sqrt", bw)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = (x.data > 0).astype(compute_dtype())
    data = x.data * mask

    def bw(g, inputs, out, needs):
        return (mul(g, Tensor(mask)),)

    return make_node(data, (x,), "relu", bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.data.astype(np.float64)
    pos = v >= 0
    e = np.exp(-np.abs(v))
    data = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(compute_dtype())

    def bw(g, inputs, out, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    return make_node(data, (x,), "sigmoid", bw)


# -- reductions ----------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    data = np.asarray(x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims), dtype=compute_dtype())
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def bw(g, inputs, out, needs):
        return (broadcast_to(reshape(g, kept), inputs[0].shape),)

    return make_node(data, (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, returned as a 0-d tensor."""
    return mean(x)


def l2_norm(x: Tensor) -> Tensor:
    return sqrt(sum(mul(x, x)))


def detach(x: Tensor) -> Tensor:
    return x.detach()
