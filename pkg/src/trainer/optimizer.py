import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from configuration import Schedule, TrainConfig
from tensor_core import Parameter


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to min_lr_ratio * lr at the final step."""
    peak = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    if cfg.schedule == Schedule.CONSTANT:
        return peak
    floor = peak * cfg.min_lr_ratio
    progress = min(1.0, (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float(np.sum(np.square(param.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for param in params:
            if param.grad is not None:
                param.grad *= scale
    return norm


class AdamW:
    """
    Adam with decoupled weight decay. Parameters flagged decay=False (norm scales, gate biases, conv kernels) skip
    the decay term.
    """

    def __init__(self, named_params: List[Tuple[str, Parameter]], betas: Tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.1):
        self.named_params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.named_params}

    @classmethod
    def from_config(cls, named_params: List[Tuple[str, Parameter]], cfg: TrainConfig) -> "AdamW":
        return cls(named_params, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                   weight_decay=cfg.weight_decay)

    @property
    def params(self) -> List[Parameter]:
        return [param for _, param in self.named_params]

    def step(self, lr: float) -> None:
        self.t += 1
        bias_correction1 = 1.0 - self.beta1 ** self.t
        bias_correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.named_params:
            if param.grad is None:
                continue
            grad = param.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            if param.decay and self.weight_decay:
                param.data *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v) / math.sqrt(bias_correction2) + self.eps
            param.data -= (lr / bias_correction1) * m / denom

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        names = {name for name, _ in self.named_params}
        if set(state["m"]) != names or set(state["v"]) != names:
            raise KeyError("Optimizer state does not match the registered parameters")
        self.t = int(state["t"])
        for name, param in self.named_params:
            self.m[name] = np.array(state["m"][name], dtype=param.data.dtype, copy=True)
            self.v[name] = np.array(state["v"][name], dtype=param.data.dtype, copy=True)
