import logging
import math
from typing import Callable, Optional

import numpy as np

from delta_op import EPS_K_TRAINING, delta_update, normalize_direction
from tensor_core import Linear, Module, Parameter, RMSNorm, Tensor, ops, rms_normalize
from tensor_core.module import scaled_normal

GATE_DTYPE = np.float64
BETA_LOGIT_CLAMP = 30.0
DEFAULT_BETA_INIT = 1.0
DEFAULT_BETA_HIDDEN_SIZE = 32

Sublayer = Callable[[Tensor], Tensor]
BetaObserver = Callable[[Tensor], None]


def open_gate_bounds(dtype) -> tuple:
    """Smallest and largest values of dtype strictly inside (0, 2)."""
    dtype = np.dtype(dtype)
    return np.nextafter(dtype.type(0.0), dtype.type(1.0)), np.nextafter(dtype.type(2.0), dtype.type(0.0))


def beta_logit(beta_init: float) -> float:
    """Bias that makes 2 * sigmoid(bias) equal beta_init, clamped to the gate's logit range."""
    half = min(max(beta_init / 2.0, 1e-12), 1.0 - 1e-12)
    return float(np.clip(math.log(half / (1.0 - half)), -BETA_LOGIT_CLAMP, BETA_LOGIT_CLAMP))


class BetaGate(Module):
    """
    Scalar gate beta = 2 * sigmoid(logit(c)) in (0, 2).

    mode "linear" computes the logit as Linear(c); mode "mlp" as Linear(tanh(Linear(c))). Input weights of the output
    layer start at zero so beta equals beta_init at initialisation. Logits are computed in float64 whatever the model
    precision. The result stays strictly inside (0, 2) after the cast to the context dtype.
    """

    def __init__(self, d: int, rng: np.random.Generator, mode: str = "linear", beta_init: float = DEFAULT_BETA_INIT,
                 hidden_size: int = DEFAULT_BETA_HIDDEN_SIZE):
        if not 0.0 < beta_init < 2.0:
            raise ValueError(f"beta_init must lie in (0, 2), got {beta_init}")
        self.mode = mode
        self.beta_init = beta_init
        if mode == "mlp":
            self.hidden = Linear(d, hidden_size, rng)
            self.hidden.weight.data = self.hidden.weight.data.astype(GATE_DTYPE)
            fan_in = hidden_size
        elif mode == "linear":
            self.hidden = None
            fan_in = d
        else:
            raise ValueError(f"Unknown gate mode '{mode}'")
        self.weight = Parameter(np.zeros(fan_in), dtype=GATE_DTYPE)
        self.bias = Parameter(np.array(beta_logit(beta_init)), decay=False, dtype=GATE_DTYPE)

    def logit(self, context: Tensor) -> Tensor:
        c = ops.astype(context, GATE_DTYPE)
        if self.hidden is not None:
            c = ops.tanh(self.hidden(c))
        return ops.add(ops.matmul(c, self.weight), self.bias)

    def forward(self, context: Tensor) -> Tensor:
        logit = ops.clip(self.logit(context), -BETA_LOGIT_CLAMP, BETA_LOGIT_CLAMP)
        beta = ops.astype(ops.mul(ops.sigmoid(logit), 2.0), context.dtype)
        # rounding to a narrower dtype can land on an endpoint
        low, high = open_gate_bounds(beta.dtype)
        return ops.clip(beta, low, high)


def gate_beta(context: Tensor, gate: BetaGate) -> Tensor:
    return gate(context)


class DirectionBranch(Module):
    """
    Auxiliary direction generator phi_k: a single linear map by default, or a two-layer MLP.
    """

    def __init__(self, in_features: int, d: int, rng: np.random.Generator, mode: str = "linear",
                 hidden_size: Optional[int] = None):
        self.mode = mode
        if mode == "linear":
            self.layers = [Linear(in_features, d, rng)]
        elif mode == "mlp":
            hidden_size = hidden_size or 4 * d
            self.layers = [Linear(in_features, hidden_size, rng), Linear(hidden_size, d, rng)]
        else:
            raise ValueError(f"Unknown direction mode '{mode}'")

    def forward(self, x: Tensor) -> Tensor:
        out = self.layers[0](x)
        for layer in self.layers[1:]:
            out = layer(ops.silu(out))
        return out


def _vector_update(x: Tensor, k_tilde: Tensor, beta: Tensor, v: Tensor, eps_k: float) -> Tensor:
    direction = normalize_direction(k_tilde, eps_k)
    updated = delta_update(ops.unsqueeze(x, -1), direction, beta, ops.unsqueeze(v, -1))
    return ops.squeeze(updated, -1)


def block_forward_kmap(x: Tensor, sublayer: Sublayer, gate: BetaGate, w_v: Tensor, eps_k: float = EPS_K_TRAINING,
                       norm: Sublayer = rms_normalize, value_from_context: bool = False,
                       beta_override: Optional[float] = None, observer: Optional[BetaObserver] = None) -> Tensor:
    """
    k-Map wiring: the sublayer output is the write direction, v = sigmoid(w_v^T x) is the content.

    Returns x + beta (v - k^T x) k. beta_override bypasses the gate (test hook).
    """
    context = norm(x)
    k_tilde = sublayer(context)
    v = ops.sigmoid(ops.matmul(context if value_from_context else x, w_v))
    beta = gate(context) if beta_override is None else beta_override
    if observer is not None:
        observer(ops.as_tensor(beta, like=x))
    return _vector_update(x, k_tilde, beta, v, eps_k)


def block_forward_vmap(x: Tensor, sublayer: Sublayer, gate: BetaGate, phi_k: Sublayer, w_p: Tensor,
                       eps_k: float = EPS_K_TRAINING, norm: Sublayer = rms_normalize,
                       beta_override: Optional[float] = None, observer: Optional[BetaObserver] = None) -> Tensor:
    """
    v-Map wiring: the sublayer output gives the content v = sigmoid(w_p^T F(x_ctx)), phi_k(x_ctx) the direction.
    """
    context = norm(x)
    v = ops.sigmoid(ops.matmul(sublayer(context), w_p))
    k_tilde = phi_k(context)
    beta = gate(context) if beta_override is None else beta_override
    if observer is not None:
        observer(ops.as_tensor(beta, like=x))
    return _vector_update(x, k_tilde, beta, v, eps_k)


class DeltaResidual(Module):
    """
    Delta residual connection for a vector residual stream (d_v = 1), replacing x + F(RMSNorm(x)).
    """

    def __init__(self, d: int, rng: np.random.Generator, map_mode: str = "kmap", eps_k: float = EPS_K_TRAINING,
                 gate_mode: str = "linear", beta_init: float = DEFAULT_BETA_INIT,
                 beta_hidden_size: int = DEFAULT_BETA_HIDDEN_SIZE, direction_mode: str = "linear",
                 value_from_context: bool = False):
        if map_mode not in ("kmap", "vmap"):
            raise ValueError(f"Unknown map mode '{map_mode}'")
        self.map_mode = map_mode
        self.eps_k = eps_k
        self.value_from_context = value_from_context
        self.norm = RMSNorm(d)
        self.gate = BetaGate(d, rng, mode=gate_mode, beta_init=beta_init, hidden_size=beta_hidden_size)
        self.w = Parameter(scaled_normal(rng, (d,), d))
        self.phi_k = DirectionBranch(d, d, rng, mode=direction_mode) if map_mode == "vmap" else None
        self.last_beta: Optional[np.ndarray] = None

    def _observe(self, beta: Tensor) -> None:
        self.last_beta = np.array(beta.data, copy=True)
        if self.last_beta.size and (self.last_beta.min() <= 0.0 or self.last_beta.max() >= 2.0):
            logging.warning(f"Gate saturated at an endpoint, beta range [{self.last_beta.min()}, "
                            f"{self.last_beta.max()}]")

    def forward(self, x: Tensor, sublayer: Sublayer, beta_override: Optional[float] = None) -> Tensor:
        if self.map_mode == "kmap":
            return block_forward_kmap(x, sublayer, self.gate, self.w, eps_k=self.eps_k, norm=self.norm,
                                      value_from_context=self.value_from_context, beta_override=beta_override,
                                      observer=self._observe)
        return block_forward_vmap(x, sublayer, self.gate, self.phi_k, self.w, eps_k=self.eps_k, norm=self.norm,
                                  beta_override=beta_override, observer=self._observe)
