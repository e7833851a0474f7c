import contextlib
import logging
import os
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_DTYPE = np.float64
SUPPORTED_DTYPES = {"float32": np.float32, "float64": np.float64}

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


_default_dtype = DEFAULT_DTYPE
_debug = os.environ.get("DDL_DEBUG", "") not in ("", "0")


def set_default_dtype(dtype: Union[str, type]) -> None:
    global _default_dtype
    _default_dtype = SUPPORTED_DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype: Union[str, type]) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug(enabled: bool) -> None:
    """Reject non-finite op inputs with NonFiniteError while enabled."""
    global _debug
    _debug = enabled
    logging.debug(f"Tensor debug checks {'enabled' if enabled else 'disabled'}")


def debug_enabled() -> bool:
    return _debug


class Tensor:
    """
    Dense array taking part in reverse-mode differentiation.

    A tensor is a leaf when it was created directly (parameters, inputs) and a node when it is the output of a
    recorded op. Only tensors with requires_grad participate in the tape; a detached tensor never receives gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node_id", "_retain_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            dtype = _default_dtype
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["Tape"] = None
        self._node_id: Optional[int] = None
        self._retain_grad = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"Tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        self._retain_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(f"Gradient of shape {grad.shape} does not match tensor of shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, retain_tape: bool = False) -> None:
        backward(self, retain_tape=retain_tape)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_flag})"

    # Operator sugar. The op implementations live in tensor_core.ops.
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return _ops().transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops().mean(self, axis=axis, keepdims=keepdims)


def _ops():
    from tensor_core import ops
    return ops


@dataclass
class TapeRecord:
    node_id: int
    op_name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class Tape:
    """
    Ordered record of differentiable ops executed during one forward pass.

    Backward replays the records in reverse order, each record at most once, and accumulates the gradient of every
    input additively so fan-out is handled by summation.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __len__(self):
        return len(self.records)

    def record(self, op_name: str, inputs: Sequence[Tensor], output: Tensor, backward_rule: BackwardRule) -> None:
        node_id = len(self.records)
        self.records.append(TapeRecord(node_id, op_name, tuple(inputs), output, backward_rule))
        output.requires_grad = True
        output._tape = self
        output._node_id = node_id

    def clear(self) -> None:
        for record in self.records:
            record.output._tape = None
            record.output._node_id = None
        self.records = []

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise TapeError("Loss tensor was not recorded on this tape")
        grads = {loss._node_id: np.ones_like(loss.data)}
        for record in reversed(self.records[:loss._node_id + 1]):
            grad_output = grads.pop(record.node_id, None)
            if grad_output is None:
                continue
            if record.output._retain_grad:
                record.output.accumulate_grad(grad_output)
            input_grads = record.backward_rule(grad_output)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self and tensor._node_id is not None:
                    if tensor._node_id in grads:
                        grads[tensor._node_id] = grads[tensor._node_id] + grad
                    else:
                        grads[tensor._node_id] = grad
                else:
                    tensor.accumulate_grad(grad)


_active_tape: ContextVar[Optional[Tape]] = ContextVar("active_tape", default=None)
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


def current_tape() -> Tape:
    tape = _active_tape.get()
    if tape is None:
        tape = Tape()
        _active_tape.set(tape)
    return tape


@contextlib.contextmanager
def new_tape() -> Iterator[Tape]:
    """Record the ops of the enclosed block on a fresh tape."""
    tape = Tape()
    token = _active_tape.set(tape)
    try:
        yield tape
    finally:
        _active_tape.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """
    Fill the grad of every tape-attached leaf with d loss / d leaf.
    Args:
        loss: scalar-shaped tensor recorded on a tape.
        retain_tape: keep the tape so backward can be replayed; by default the tape is freed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"Backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("Loss is not attached to a tape, nothing to differentiate")
    tape = loss._tape
    tape.backward(loss)
    if not retain_tape:
        tape.clear()
