import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from tensor_core import ops
from tensor_core.tensor import Tensor, get_default_dtype

RMS_NORM_EPS = 1e-6


class Parameter(Tensor):
    """Trainable leaf tensor. decay=False excludes it from decoupled weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, dtype=None, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.decay = decay


class Module:
    """Container of parameters and sub-modules discovered through instance attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr_name, value in vars(self).items():
            full_name = f"{prefix}{attr_name}"
            if isinstance(value, Parameter):
                yield full_name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{full_name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full_name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full_name}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"State does not match module parameters. Missing: {missing}, unexpected: {unexpected}")
        for name, param in own.items():
            if state[name].shape != param.shape:
                raise ValueError(f"Parameter '{name}' has shape {param.shape}, state holds {state[name].shape}")
            param.data = np.array(state[name], dtype=param.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def astype(self, dtype) -> "Module":
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self


def scaled_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) / math.sqrt(fan_in)


class Linear(Module):
    """y = x W (+ b) with W stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = False,
                 zero_init: bool = False, decay: bool = True, init_scale: float = 1.0):
        self.in_features = in_features
        self.out_features = out_features
        dtype = get_default_dtype()
        weight = np.zeros((in_features, out_features)) if zero_init else init_scale * scaled_normal(
            rng, (in_features, out_features), in_features)
        self.weight = Parameter(weight, decay=decay, dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), decay=False, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


def rms_normalize(x: Tensor, eps: float = RMS_NORM_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis."""
    mean_square = ops.mean(ops.mul(x, x), axis=-1, keepdims=True)
    return ops.mul(x, ops.rsqrt(ops.add(mean_square, eps)))


class RMSNorm(Module):

    def __init__(self, d: int, eps: float = RMS_NORM_EPS):
        self.eps = eps
        self.scale = Parameter(np.ones(d), decay=False, dtype=get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(rms_normalize(x, self.eps), self.scale)
