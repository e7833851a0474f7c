"""
Pre-norm byte-level transformer whose sublayer residual connections are either additive or Delta residual blocks.
"""
import logging
import math
from typing import Callable, List, Optional, Sequence

import numpy as np

from configuration import DdlSettings, ModelConfig, ResidualMode, Variant
from delta_block import DeltaResidual
from state_expansion import (Compressor, CompressorMode, Expander, ExpanderMode, ExpandedDeltaResidual)
from tensor_core import Linear, Module, Parameter, RMSNorm, Tensor, no_grad, ops
from tensor_core.module import scaled_normal

SWIGLU_MULTIPLE = 8
HEAD_INIT_SCALE = 0.1

Sublayer = Callable[[Tensor], Tensor]


class BackboneError(Exception):
    pass


class SequenceOverflowError(BackboneError):
    pass


def swiglu_hidden_size(d: int) -> int:
    """8/3 d rounded to the nearest multiple of 8."""
    return max(SWIGLU_MULTIPLE, SWIGLU_MULTIPLE * int(round(8.0 * d / 3.0 / SWIGLU_MULTIPLE)))


def rotary_tables(seq_len: int, head_dim: int, base: float = 10000.0) -> tuple:
    inv_freq = 1.0 / (base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + head_dim/2) of x (..., T, head_dim) by position-dependent angles."""
    half = x.shape[-1] // 2
    seq = x.shape[-2]
    cos = cos[:seq].astype(x.dtype)
    sin = sin[:seq].astype(x.dtype)
    first = x[..., :half]
    second = x[..., half:]
    return ops.concat([ops.sub(ops.mul(first, cos), ops.mul(second, sin)),
                       ops.add(ops.mul(first, sin), ops.mul(second, cos))], axis=-1)


def causal_mask(seq: int) -> np.ndarray:
    return np.triu(np.ones((seq, seq), dtype=bool), k=1)


class AttentionLayer(Module):
    """Causal multi-head attention with rotary positions and RMS-normalised queries and keys."""

    def __init__(self, d: int, n_heads: int, head_dim: int, max_seq_len: int, rng: np.random.Generator,
                 rope_base: float = 10000.0):
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.max_seq_len = max_seq_len
        inner = n_heads * head_dim
        self.wq = Linear(d, inner, rng)
        self.wk = Linear(d, inner, rng)
        self.wv = Linear(d, inner, rng)
        self.wo = Linear(inner, d, rng)
        self.q_norm = RMSNorm(head_dim)
        self.k_norm = RMSNorm(head_dim)
        self._cos, self._sin = rotary_tables(max_seq_len, head_dim, rope_base)

    def _heads(self, x: Tensor, batch: int, seq: int) -> Tensor:
        return ops.swapaxes(ops.reshape(x, (batch, seq, self.n_heads, self.head_dim)), 1, 2)

    def forward(self, x: Tensor) -> Tensor:
        return self.attention_forward(x)

    def attention_forward(self, x: Tensor) -> Tensor:
        batch, seq = x.shape[0], x.shape[1]
        if seq > self.max_seq_len:
            raise SequenceOverflowError(f"Sequence of {seq} tokens exceeds the configured limit {self.max_seq_len}")
        q = apply_rotary(self.q_norm(self._heads(self.wq(x), batch, seq)), self._cos, self._sin)
        k = apply_rotary(self.k_norm(self._heads(self.wk(x), batch, seq)), self._cos, self._sin)
        v = self._heads(self.wv(x), batch, seq)
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        weights = ops.softmax(ops.masked_fill(scores, causal_mask(seq)), axis=-1)
        mixed = ops.swapaxes(ops.matmul(weights, v), 1, 2)
        return self.wo(ops.reshape(mixed, (batch, seq, self.n_heads * self.head_dim)))


class MlpLayer(Module):
    """SwiGLU unit W_down(silu(W_gate x) * W_up x)."""

    def __init__(self, d: int, rng: np.random.Generator, hidden_size: Optional[int] = None):
        hidden_size = hidden_size or swiglu_hidden_size(d)
        self.w_gate = Linear(d, hidden_size, rng)
        self.w_up = Linear(d, hidden_size, rng)
        self.w_down = Linear(hidden_size, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp_forward(x)

    def mlp_forward(self, x: Tensor) -> Tensor:
        return self.w_down(ops.mul(ops.silu(self.w_gate(x)), self.w_up(x)))


class AdditiveResidual(Module):
    """x + F(RMSNorm(x))."""

    def __init__(self, d: int):
        self.norm = RMSNorm(d)
        self.last_beta = None

    def forward(self, x: Tensor, sublayer: Sublayer, beta_override: Optional[float] = None) -> Tensor:
        return ops.add(x, sublayer(self.norm(x)))


class PooledAdditiveResidual(Module):
    """Additive update of an expanded state: the sublayer reads the compressed state, its output is added to every
    value channel."""

    def __init__(self, d: int, d_v: int, compressor_mode: CompressorMode, kernel_size: int,
                 read_init: Optional[float] = None):
        self.compressor = Compressor(d, d_v, mode=compressor_mode, kernel_size=kernel_size, read_init=read_init)
        self.norm = RMSNorm(d)
        self.last_beta = None

    def forward(self, X: Tensor, sublayer: Sublayer, beta_override: Optional[float] = None) -> Tensor:
        return ops.add(X, ops.unsqueeze(sublayer(self.norm(self.compressor(X))), -1))


class TransformerLayer(Module):

    def __init__(self, model_cfg: ModelConfig, ddl: DdlSettings, rng: np.random.Generator):
        d = model_cfg.d
        self.attn = AttentionLayer(d, model_cfg.n_heads, model_cfg.head_dim, model_cfg.seq_len, rng,
                                   rope_base=model_cfg.rope_base)
        self.mlp = MlpLayer(d, rng)
        use_ddl = model_cfg.residual_mode == ResidualMode.DDL
        self.attn_residual = _make_residual(d, ddl, rng, use_ddl and ddl.apply_to_attention, use_ddl)
        self.mlp_residual = _make_residual(d, ddl, rng, use_ddl and ddl.apply_to_mlp, use_ddl)

    def forward(self, x: Tensor, beta_override: Optional[float] = None) -> Tensor:
        x = self.attn_residual(x, self.attn, beta_override=beta_override)
        return self.mlp_residual(x, self.mlp, beta_override=beta_override)

    def betas(self) -> List[np.ndarray]:
        return [residual.last_beta for residual in (self.attn_residual, self.mlp_residual)
                if residual.last_beta is not None]


def _compressor_mode(variant: Variant) -> CompressorMode:
    return CompressorMode.CHANNEL_AXIS if variant.compresses_channels else CompressorMode.TIME_AXIS


def _make_residual(d: int, ddl: DdlSettings, rng: np.random.Generator, delta: bool, ddl_model: bool) -> Module:
    expanded = ddl_model and ddl.d_v > 1
    if not delta:
        if expanded:
            return PooledAdditiveResidual(d, ddl.d_v, _compressor_mode(ddl.variant),
                                          ddl.state_shortconv_kernel_size, ddl.state_read_init)
        return AdditiveResidual(d)
    if expanded:
        return ExpandedDeltaResidual(d, ddl.d_v, rng, map_mode=ddl.map_mode.value,
                                     compressor_mode=_compressor_mode(ddl.variant),
                                     state_kernel_size=ddl.state_shortconv_kernel_size,
                                     read_init=ddl.state_read_init, eps_k=ddl.eps_k, gate_mode=ddl.gate_mode.value,
                                     beta_init=ddl.beta_init, beta_hidden_size=ddl.beta_hidden_size,
                                     direction_mode=ddl.direction_mode.value,
                                     direction_pool=ddl.direction_pool.value)
    return DeltaResidual(d, rng, map_mode=ddl.map_mode.value, eps_k=ddl.eps_k, gate_mode=ddl.gate_mode.value,
                         beta_init=ddl.beta_init, beta_hidden_size=ddl.beta_hidden_size,
                         direction_mode=ddl.direction_mode.value, value_from_context=ddl.value_from_context)


class Model(Module):
    """
    Token embedding, n_layers of (attention, MLP) sublayers each behind its residual connection, final RMSNorm and
    vocabulary head.

    Under DDL with d_v > 1 the residual stream is the expanded state (batch, seq, d, d_v): the embedding is expanded
    once, every sublayer writes through the Compress-Process-Expand step, and a learned read vector pools the state
    before the final norm.
    """

    def __init__(self, model_cfg: ModelConfig, ddl: Optional[DdlSettings] = None,
                 rng: Optional[np.random.Generator] = None):
        self.config = model_cfg
        self.ddl = ddl or DdlSettings()
        rng = rng if rng is not None else np.random.default_rng(0)
        d = model_cfg.d
        self.expanded = model_cfg.residual_mode == ResidualMode.DDL and self.ddl.d_v > 1
        self.embedding = Parameter(rng.standard_normal((model_cfg.vocab_size, d)))
        self.expander = None
        self.readout = None
        if self.expanded:
            mode = ExpanderMode.EMBED_CONV if self.ddl.variant.expands_embedding else ExpanderMode.REPEAT
            self.expander = Expander(d, self.ddl.d_v, mode=mode,
                                     kernel_size=self.ddl.input_embed_shortconv_kernel_size)
            self.readout = Parameter(np.full(self.ddl.d_v, 1.0 / self.ddl.d_v), decay=False)
        self.layers = [TransformerLayer(model_cfg, self.ddl, rng) for _ in range(model_cfg.n_layers)]
        self.final_norm = RMSNorm(d)
        self.head = None if model_cfg.tie_embeddings else Linear(d, model_cfg.vocab_size, rng,
                                                                  init_scale=HEAD_INIT_SCALE)
        logging.debug(f"Built model with {sum(p.size for p in self.parameters())} parameters, "
                      f"residual mode {model_cfg.residual_mode.value}, d_v {self.ddl.d_v}")

    def embed(self, tokens: np.ndarray) -> Tensor:
        x = ops.embedding(self.embedding, tokens)
        if self.expanded:
            x = self.expander(x)
        return x

    def logits_from_stream(self, x: Tensor) -> Tensor:
        if self.expanded:
            x = ops.matmul(x, self.readout)
        x = self.final_norm(x)
        if self.head is None:
            return ops.matmul(x, ops.transpose(self.embedding))
        return self.head(x)

    def forward(self, tokens: np.ndarray, beta_override: Optional[float] = None) -> Tensor:
        return self.model_forward(tokens, beta_override=beta_override)

    def model_forward(self, tokens: np.ndarray, beta_override: Optional[float] = None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise BackboneError(f"Tokens must be a (batch, seq) array, got shape {tokens.shape}")
        if tokens.shape[1] > self.config.seq_len:
            raise SequenceOverflowError(f"Sequence of {tokens.shape[1]} tokens exceeds the configured limit "
                                        f"{self.config.seq_len}")
        x = self.embed(tokens)
        for layer in self.layers:
            x = layer(x, beta_override=beta_override)
        return self.logits_from_stream(x)

    def loss(self, tokens: np.ndarray, targets: np.ndarray) -> Tensor:
        return ops.cross_entropy(self(tokens), targets)

    def layer_betas(self) -> List[Optional[np.ndarray]]:
        """Gate values of each layer's delta blocks from the last forward pass, None for layers without one."""
        betas = []
        for layer in self.layers:
            found = layer.betas()
            betas.append(np.concatenate([b.reshape(-1) for b in found]) if found else None)
        return betas

    def mean_betas(self) -> List[Optional[float]]:
        return [None if b is None else float(np.mean(b)) for b in self.layer_betas()]


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    return ops.cross_entropy(logits, targets)


def generate(model: Model, prompt_tokens: Sequence[int], max_new_tokens: int) -> List[int]:
    """Greedy decoding over the last seq_len tokens of the running sequence."""
    tokens = [int(t) for t in prompt_tokens]
    if not tokens:
        raise BackboneError("Generation needs at least one prompt token")
    with no_grad():
        for _ in range(max_new_tokens):
            window = np.array(tokens[-model.config.seq_len:], dtype=np.int64)[None, :]
            logits = model(window)
            tokens.append(int(np.argmax(logits.data[0, -1])))
    return tokens
