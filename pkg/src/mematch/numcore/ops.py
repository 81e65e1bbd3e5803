"""Elementwise, reduction and linear-algebra ops with their backward rules."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .tensor import Tensor, as_tensor, record

NORM_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-d/2-d operands (vector-matrix, matrix-vector, matrix-matrix)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-d/2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return record(a.data @ b.data, (a, b), backward)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs two vectors of equal length, got {a.shape} and {b.shape}")
    return matmul(a, b)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(x.data[index], (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(out, tensors, backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split form avoids overflow in exp for large |x|
    pos = x.data >= 0
    z = np.exp(-np.abs(x.data))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("log_softmax of an empty tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(y, (x,), backward)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale ``x`` to unit L2 norm along ``axis``.

    Raises DegenerateInputError when any norm is at or below 1e-12.
    """
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("l2_normalize of an empty tensor")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_FLOOR):
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {NORM_FLOOR:g}")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return record(y, (x,), backward)
