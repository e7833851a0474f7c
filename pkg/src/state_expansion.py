"""
Expanded residual state X of shape (batch, seq, d, d_v) and the Compress-Process-Expand protocol around it.

Short convolutions here are depthwise and causal, and their kernels are indexed by lag: tap s multiplies the value s
tokens back, positions before the sequence start read as zero.
"""
import logging
from enum import Enum
from typing import Callable, Optional

import numpy as np

from delta_block import DEFAULT_BETA_HIDDEN_SIZE, DEFAULT_BETA_INIT, BetaGate, DirectionBranch
from delta_op import EPS_K_TRAINING, delta_update, normalize_direction
from tensor_core import Module, Parameter, RMSNorm, Tensor, ops
from tensor_core.module import scaled_normal

DEFAULT_STATE_KERNEL_SIZE = 4
DEFAULT_EMBED_KERNEL_SIZE = 4

Sublayer = Callable[[Tensor], Tensor]


class ExpansionError(Exception):
    pass


class ExpanderMode(str, Enum):
    REPEAT = "repeat"
    EMBED_CONV = "embed-conv"


class CompressorMode(str, Enum):
    TIME_AXIS = "time-axis"
    CHANNEL_AXIS = "channel-axis"


class Expander(Module):
    """
    Lifts token embeddings (batch, seq, d) to the expanded state (batch, seq, d, d_v).

    repeat copies the embedding into every value channel. embed-conv runs a depthwise causal convolution over tokens
    with d_v output channels per feature; its kernel starts as the identity tap so it starts out equal to repeat.
    """

    def __init__(self, d: int, d_v: int, mode: ExpanderMode = ExpanderMode.REPEAT,
                 kernel_size: int = DEFAULT_EMBED_KERNEL_SIZE):
        if d_v < 1:
            raise ExpansionError(f"d_v must be at least 1, got {d_v}")
        if kernel_size < 1:
            raise ExpansionError(f"Embedding kernel size must be at least 1, got {kernel_size}")
        self.d = d
        self.d_v = d_v
        self.mode = ExpanderMode(mode)
        self.kernel_size = kernel_size
        self.kernel = None
        if self.mode == ExpanderMode.EMBED_CONV:
            kernel = np.zeros((d, d_v, kernel_size))
            kernel[:, :, 0] = 1.0
            self.kernel = Parameter(kernel, decay=False)

    def forward(self, emb: Tensor) -> Tensor:
        return expand_embedding(emb, self)


def expand_embedding(emb: Tensor, exp: Expander) -> Tensor:
    if exp.mode == ExpanderMode.REPEAT:
        return ops.broadcast_to(ops.unsqueeze(emb, -1), emb.shape + (exp.d_v,))
    out = None
    seq_axis = emb.ndim - 2
    for lag in range(exp.kernel_size):
        shifted = ops.unsqueeze(ops.shift(emb, lag, axis=seq_axis), -1)
        term = ops.mul(shifted, exp.kernel[:, :, lag])
        out = term if out is None else ops.add(out, term)
    return out


class Compressor(Module):
    """
    Reads the expanded state back down to a width-d sublayer input.

    time-axis: per-feature, per-channel causal convolution over tokens (identity tap at lag 0 initially), then
    pooling over the value channels with the read vector w_p (uniform 1/d_v unless read_init is given).
    channel-axis: one per-feature kernel spanning the d_v channels, so kernel_size must equal d_v.
    """

    def __init__(self, d: int, d_v: int, mode: CompressorMode = CompressorMode.TIME_AXIS,
                 kernel_size: int = DEFAULT_STATE_KERNEL_SIZE, read_init: Optional[float] = None):
        self.d = d
        self.d_v = d_v
        self.mode = CompressorMode(mode)
        self.kernel_size = kernel_size
        self.read = None
        if self.mode == CompressorMode.CHANNEL_AXIS:
            if kernel_size != d_v:
                raise ExpansionError(f"Channel-axis compression needs kernel size equal to d_v ({d_v}) so the "
                                     f"convolution returns length 1, got {kernel_size}")
            self.kernel = Parameter(np.full((d, d_v), 1.0 / d_v), decay=False)
        else:
            if kernel_size < 1:
                raise ExpansionError(f"State kernel size must be at least 1, got {kernel_size}")
            kernel = np.zeros((d, d_v, kernel_size))
            kernel[:, :, 0] = 1.0
            self.kernel = Parameter(kernel, decay=False)
            self.read = Parameter(np.full(d_v, 1.0 / d_v if read_init is None else read_init), decay=False)

    def forward(self, X: Tensor) -> Tensor:
        if self.mode == CompressorMode.CHANNEL_AXIS:
            return compress_channel_axis(X, self)
        return compress_time_axis(X, self)


def compress_time_axis(X: Tensor, c: Compressor) -> Tensor:
    """x_in[t, i] = sum_j w_p[j] sum_s c[i, j, s] X[t - s, i, j]."""
    seq_axis = X.ndim - 3
    mixed = None
    for lag in range(c.kernel_size):
        term = ops.mul(ops.shift(X, lag, axis=seq_axis), c.kernel[:, :, lag])
        mixed = term if mixed is None else ops.add(mixed, term)
    return ops.matmul(mixed, c.read)


def compress_channel_axis(X: Tensor, c: Compressor) -> Tensor:
    """x_in[t, i] = sum_j c[i, j] X[t, i, j]."""
    if c.kernel.shape[-1] != X.shape[-1]:
        raise ExpansionError(f"Channel kernel of size {c.kernel.shape[-1]} cannot consume d_v = {X.shape[-1]}")
    return ops.sum(ops.mul(X, c.kernel), axis=-1)


def _direction_input(X: Tensor, x_in: Tensor, pool: str) -> Tensor:
    if pool == "mean":
        return ops.mean(X, axis=-1)
    if pool == "flatten":
        return ops.reshape(X, X.shape[:-2] + (X.shape[-2] * X.shape[-1],))
    return x_in


def expanded_block_forward(X: Tensor, map_mode: str, sublayer: Sublayer, gate: BetaGate, W_v: Tensor,
                           compressor: Compressor, phi_k: Optional[Sublayer] = None, norm: Sublayer = None,
                           eps_k: float = EPS_K_TRAINING, direction_pool: str = "compressed",
                           beta_override: Optional[float] = None,
                           observer: Optional[Callable[[Tensor], None]] = None) -> Tensor:
    """
    One Compress-Process-Expand step: x_in = compress(X), h = F(RMSNorm(x_in)), beta = gate(RMSNorm(x_in)), then the
    rank-1 write X + beta k (v^T - k^T X) with (k, v) taken from (h, W_v x_in) under k-Map or from
    (phi_k(x_in), W_v h) under v-Map. beta, k and v are shared by all d_v channels of a token.
    """
    x_in = compressor(X)
    context = norm(x_in) if norm is not None else x_in
    h = sublayer(context)
    beta = gate(context) if beta_override is None else beta_override
    if observer is not None:
        observer(ops.as_tensor(beta, like=X))
    if map_mode == "kmap":
        k_tilde = h
        v = ops.matmul(x_in, ops.transpose(W_v))
    elif map_mode == "vmap":
        if phi_k is None:
            raise ExpansionError("v-Map needs a direction branch phi_k")
        k_tilde = phi_k(_direction_input(X, x_in, direction_pool))
        v = ops.matmul(h, ops.transpose(W_v))
    else:
        raise ExpansionError(f"Unknown map mode '{map_mode}'")
    if W_v.shape[0] == 1:
        # scalar regime keeps the bounded value of the vector block
        v = ops.sigmoid(v)
    direction = normalize_direction(k_tilde, eps_k)
    return delta_update(X, direction, beta, v)


class ExpandedDeltaResidual(Module):
    """Delta residual connection over the expanded state, one per DDL sublayer."""

    def __init__(self, d: int, d_v: int, rng: np.random.Generator, map_mode: str = "kmap",
                 compressor_mode: CompressorMode = CompressorMode.TIME_AXIS,
                 state_kernel_size: int = DEFAULT_STATE_KERNEL_SIZE, read_init: Optional[float] = None,
                 eps_k: float = EPS_K_TRAINING, gate_mode: str = "linear", beta_init: float = DEFAULT_BETA_INIT,
                 beta_hidden_size: int = DEFAULT_BETA_HIDDEN_SIZE, direction_mode: str = "linear",
                 direction_pool: str = "compressed"):
        if map_mode not in ("kmap", "vmap"):
            raise ExpansionError(f"Unknown map mode '{map_mode}'")
        self.map_mode = map_mode
        self.eps_k = eps_k
        self.direction_pool = direction_pool
        self.compressor = Compressor(d, d_v, mode=compressor_mode, kernel_size=state_kernel_size,
                                     read_init=read_init)
        self.norm = RMSNorm(d)
        self.gate = BetaGate(d, rng, mode=gate_mode, beta_init=beta_init, hidden_size=beta_hidden_size)
        self.W_v = Parameter(scaled_normal(rng, (d_v, d), d))
        self.phi_k = None
        if map_mode == "vmap":
            in_features = d * d_v if direction_pool == "flatten" else d
            self.phi_k = DirectionBranch(in_features, d, rng, mode=direction_mode)
        self.last_beta: Optional[np.ndarray] = None

    def _observe(self, beta: Tensor) -> None:
        self.last_beta = np.array(beta.data, copy=True)
        logging.debug(f"Expanded block gate mean {float(np.mean(self.last_beta)):.4f}")

    def forward(self, X: Tensor, sublayer: Sublayer, beta_override: Optional[float] = None) -> Tensor:
        return expanded_block_forward(X, self.map_mode, sublayer, self.gate, self.W_v, self.compressor,
                                      phi_k=self.phi_k, norm=self.norm, eps_k=self.eps_k,
                                      direction_pool=self.direction_pool, beta_override=beta_override,
                                      observer=self._observe)
