"""
Differentiable op suite.

Every op computes its forward value with numpy in the dtype of its operands and, when any operand requires grad and
grad recording is enabled, records a backward rule on the current tape. Backward rules return one gradient per input
(None for non-differentiable inputs) already reduced to the input's shape.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core.tensor import (BackwardRule, NonFiniteError, ShapeError, Tensor, current_tape, debug_enabled,
                                grad_enabled)

Operand = Union[Tensor, float, int, np.ndarray]
Axis = Optional[Union[int, Tuple[int, ...]]]

MASK_FILL_VALUE = -1e30


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def record_op(op_name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_rule: BackwardRule) -> Tensor:
    """Wrap a forward value as a tensor and put it on the tape when any input is attached."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(tensor.requires_grad for tensor in inputs):
        current_tape().record(op_name, inputs, out, backward_rule)
    return out


def _check_finite(op_name: str, *tensors: Tensor) -> None:
    if not debug_enabled():
        return
    for tensor in tensors:
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"Op '{op_name}' received a non-finite input of shape {tensor.shape}")


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op_name: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"Op '{op_name}' cannot broadcast shapes {a.shape} and {b.shape}") from err


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


# elementwise binary ops

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("add", a, b)
    _broadcast_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("sub", a, b)
    _broadcast_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("mul", a, b)
    _broadcast_shape("mul", a, b)
    return record_op("mul", a.data * b.data, (a, b),
                     lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("div", a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return record_op("div", out, (a, b),
                     lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def maximum(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("maximum", a, b)
    _broadcast_shape("maximum", a, b)
    take_a = a.data >= b.data
    return record_op("maximum", np.where(take_a, a.data, b.data), (a, b),
                     lambda g: (unbroadcast(g * take_a, a.shape), unbroadcast(g * ~take_a, b.shape)))


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


# linear algebra

def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_finite("matmul", a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"Op 'matmul' needs at least 1-D operands, got shapes {a.shape} and {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"Op 'matmul' cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"Op 'matmul' cannot multiply shapes {a.shape} and {b.shape}") from err

    def rule(g):
        a2 = a.data if a.ndim > 1 else a.data[None, :]
        b2 = b.data if b.ndim > 1 else b.data[:, None]
        if a.ndim == 1 and b.ndim == 1:
            g2 = np.reshape(g, (1, 1))
        elif a.ndim == 1:
            g2 = np.expand_dims(g, -2)
        elif b.ndim == 1:
            g2 = np.expand_dims(g, -1)
        else:
            g2 = g
        grad_a = unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        grad_b = unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return grad_a, grad_b

    return record_op("matmul", out, (a, b), rule)


def outer(a: Operand, b: Operand) -> Tensor:
    """Batched outer product over the last axis: (..., m) x (..., n) -> (..., m, n)."""
    a, b = _pair(a, b)
    return mul(unsqueeze(a, -1), unsqueeze(b, -2))


def astype(a: Operand, dtype) -> Tensor:
    a = as_tensor(a)
    if a.data.dtype == np.dtype(dtype):
        return a
    source = a.data.dtype
    return record_op("astype", a.data.astype(dtype), (a,), lambda g: (g.astype(source),))


# shape ops

def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Operand, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return record_op("swapaxes", np.swapaxes(a.data, axis1, axis2), (a,),
                     lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.reshape(a.data, tuple(shape))
    except ValueError as err:
        raise ShapeError(f"Op 'reshape' cannot reshape {a.shape} into {tuple(shape)}") from err
    return record_op("reshape", out, (a,), lambda g: (np.reshape(g, a.shape),))


def unsqueeze(a: Operand, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def squeeze(a: Operand, axis: int) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] != 1:
        raise ShapeError(f"Op 'squeeze' needs axis {axis} of length 1, got shape {a.shape}")
    return reshape(a, np.squeeze(a.data, axis).shape)


def broadcast_to(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError as err:
        raise ShapeError(f"Op 'broadcast_to' cannot broadcast {a.shape} to {tuple(shape)}") from err
    return record_op("broadcast_to", np.array(out), (a,), lambda g: (unbroadcast(g, a.shape),))


def getitem(a: Operand, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(part, (list, np.ndarray)) for part in parts)

    def rule(g):
        grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(grad, index, g)
        else:
            grad[index] = g
        return (grad,)

    return record_op("getitem", out, (a,), rule)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"Op 'concat' cannot join shapes {shapes} along axis {axis}") from err
    split_points = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op("concat", out, tensors, lambda g: tuple(np.split(g, split_points, axis=axis)))


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"Op 'stack' cannot stack shapes {shapes}") from err
    return record_op("stack", out, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def shift(a: Operand, steps: int, axis: int) -> Tensor:
    """Causal delay along an axis: out[t] = a[t - steps], zero for t < steps."""
    a = as_tensor(a)
    if steps == 0:
        return a
    length = a.shape[axis]
    out = np.zeros_like(a.data)
    if steps < length:
        dst = [slice(None)] * a.ndim
        src = [slice(None)] * a.ndim
        dst[axis] = slice(steps, None)
        src[axis] = slice(0, length - steps)
        out[tuple(dst)] = a.data[tuple(src)]

    def rule(g):
        grad = np.zeros_like(g)
        if steps < length:
            grad[tuple(src)] = g[tuple(dst)]
        return (grad,)

    return record_op("shift", out, (a,), rule)


# reductions

def sum(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", np.asarray(out), (a,), rule)


def mean(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# elementwise unary ops

def sqrt(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("sqrt", a)
    out = np.sqrt(a.data)
    return record_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def rsqrt(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("rsqrt", a)
    out = 1.0 / np.sqrt(a.data)
    return record_op("rsqrt", out, (a,), lambda g: (g * -0.5 * out * out * out,))


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a)
    out = np.exp(a.data)
    return record_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a)
    return record_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("tanh", a)
    out = np.tanh(a.data)
    return record_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _logistic(x: np.ndarray) -> np.ndarray:
    # two-branch form stays accurate in both tails
    positive = x >= 0
    safe = np.where(positive, -x, x)
    e = np.exp(safe)
    return np.where(positive, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("sigmoid", a)
    out = _logistic(a.data)
    return record_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Operand) -> Tensor:
    a = as_tensor(a)
    _check_finite("silu", a)
    s = _logistic(a.data)
    return record_op("silu", a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def clip(a: Operand, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    _check_finite("clip", a)
    inside = (a.data >= low) & (a.data <= high)
    return record_op("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def masked_fill(a: Operand, mask: np.ndarray, value: float = MASK_FILL_VALUE) -> Tensor:
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return record_op("masked_fill", np.where(mask, a.data.dtype.type(value), a.data), (a,),
                     lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


def softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite("softmax", a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return record_op("softmax", out, (a,),
                     lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite("log_softmax", a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)
    return record_op("log_softmax", out, (a,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


# lookups and losses

def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise ShapeError(f"Embedding indices out of range for table of shape {weight.shape}")

    def rule(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return record_op("embedding", weight.data[indices], (weight,), rule)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy of logits (..., V) against integer targets (...)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"Op 'cross_entropy' got logits {logits.shape} and targets {targets.shape}")
    _check_finite("cross_entropy", logits)
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    count = targets.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def rule(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
                          axis=-1)
        return (grad * (g / count),)

    return record_op("cross_entropy", loss, (logits,), rule)
