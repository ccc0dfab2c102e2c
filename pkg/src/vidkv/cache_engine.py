"""Prefill / decode lifecycle of the quantized KV cache for one attention head.

The first ``l - l % G`` prefill tokens are quantized; the remainder sits in
full-precision residual buffers. Each decode step appends to the residuals and
attends over ``[dequantized keys | key residual]``. When the value residual
reaches ``R`` tokens both residuals are flushed into quantized blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import QuantConfig
from .errors import ConfigError, GeometryError
from .key_quant import ChannelPartition, QuantizedKeyBlock, dequantize_key_array, quantize_key_block
from .quant_core import GroupGeometry
from .tensor_io import DecodeTrace, KvSlab, SegmentSpec
from .value_quant import (
    ProtectedSet,
    TernaryParams,
    dequantize_value_array,
    importance_scores,
    quantize_value_block,
    select_protected,
    value_weighted_sum,
)

logger = logging.getLogger(__name__)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def attention_reference(q, K, V) -> np.ndarray:
    """Exact ``softmax(q K^T / sqrt(D)) V`` in float64."""
    K = np.asarray(K.data if isinstance(K, KvSlab) else K, dtype=np.float64)
    V = np.asarray(V.data if isinstance(V, KvSlab) else V, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if K.shape[0] != V.shape[0] or K.shape[1] != q.size:
        raise GeometryError("attention_reference: inconsistent shapes")
    w = softmax(K @ q / np.sqrt(K.shape[1]))
    return w @ V


@dataclass
class CacheState:
    """Quantized cache of one head. Single writer: decode_step mutates it in place.

    In identity mode ``key_blocks`` / ``value_blocks`` hold raw KvSlab rows.
    """

    config: QuantConfig
    segments: SegmentSpec
    channels: int
    key_blocks: list = field(default_factory=list)
    value_blocks: list = field(default_factory=list)
    key_residual: KvSlab | None = None
    value_residual: KvSlab | None = None
    frozen_partition: ChannelPartition | None = None
    protected: ProtectedSet = field(default_factory=ProtectedSet.empty)
    tokens_seen: int = 0
    flush_count: int = 0
    _key_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.key_residual is None:
            self.key_residual = KvSlab.empty(self.channels)
        if self.value_residual is None:
            self.value_residual = KvSlab.empty(self.channels)

    @property
    def quantized_tokens(self) -> int:
        return sum(b.tokens for b in self.value_blocks)

    @property
    def residual_tokens(self) -> int:
        return self.value_residual.tokens

    @property
    def ternary_params(self) -> TernaryParams:
        return TernaryParams(self.config.gamma, GroupGeometry("per_channel", self.config.G))

    def key_matrix(self) -> np.ndarray:
        """Keys the decoder attends over: dequantized blocks then FP residual (float64)."""
        if self._key_cache is None:
            parts = [_key_array(b) for b in self.key_blocks]
            self._key_cache = (
                np.concatenate(parts, axis=0) if parts else np.zeros((0, self.channels))
            )
        return np.concatenate([self._key_cache, self.key_residual.data.astype(np.float64)], axis=0)

    def value_matrix(self) -> np.ndarray:
        parts = [_value_array(b) for b in self.value_blocks]
        parts.append(self.value_residual.data.astype(np.float64))
        return np.concatenate(parts, axis=0)

    def invalidate(self) -> None:
        self._key_cache = None


def _key_array(block) -> np.ndarray:
    if isinstance(block, KvSlab):
        return block.data.astype(np.float64)
    return dequantize_key_array(block)


def _value_array(block) -> np.ndarray:
    if isinstance(block, KvSlab):
        return block.data.astype(np.float64)
    return dequantize_value_array(block)


def _quantize_values(state: CacheState, window: KvSlab, mode: str, protected: ProtectedSet | None,
                     offset: int):
    if state.config.identity:
        return window
    return quantize_value_block(window, state.ternary_params, protected, offset, mode)


def _quantize_keys(state: CacheState, window: KvSlab, frozen: ChannelPartition | None):
    if state.config.identity:
        return window
    return quantize_key_block(window, state.config, frozen)


def prefill(K: KvSlab, V: KvSlab, config: QuantConfig = QuantConfig(),
            segments: SegmentSpec | None = None, X_v: KvSlab | None = None,
            X_t: KvSlab | None = None) -> CacheState:
    if K.shape != V.shape:
        raise GeometryError(f"K {K.shape} and V {V.shape} differ")
    segments = segments or SegmentSpec.vision_only(K.tokens)
    segments.check(K.tokens)
    state = CacheState(config, segments, K.channels)
    l = K.tokens
    n_q = l - l % config.G

    if config.p > 0 and not config.identity:
        if X_v is None or X_t is None:
            raise ConfigError("p > 0 requires cross-modal inputs X_v and X_t")
        if X_v.tokens != segments.vision_len:
            raise GeometryError("X_v must have one row per vision token")
        scores = importance_scores(X_v, X_t)
        state.protected = select_protected(scores, config.p, segments.system_len, segments.vision_len)

    if n_q:
        in_span = state.protected.indices[state.protected.indices < n_q]
        protected = ProtectedSet(in_span, state.protected.p)
        state.value_blocks.append(_quantize_values(state, V.rows(0, n_q), config.flush_value_mode, protected, 0))
        key_block = _quantize_keys(state, K.rows(0, n_q), None)
        state.key_blocks.append(key_block)
        if config.key_requant == "frozen_incremental" and isinstance(key_block, QuantizedKeyBlock):
            state.frozen_partition = key_block.partition
    state.key_residual = K.rows(n_q)
    state.value_residual = V.rows(n_q)
    state.tokens_seen = l
    return state


def flush_residual(state: CacheState, force: bool = False) -> int:
    """Move whole groups of residual tokens into quantized blocks; returns tokens flushed.

    Without ``force`` this only fires once the value residual holds R tokens.
    """
    cfg = state.config
    n_res = state.value_residual.tokens
    if not force and n_res < cfg.R:
        return 0
    n = n_res - n_res % cfg.G
    if n == 0:
        return 0
    v_win, k_win = state.value_residual.rows(0, n), state.key_residual.rows(0, n)
    offset = state.quantized_tokens
    state.value_blocks.append(_quantize_values(state, v_win, cfg.flush_value_mode, None, offset))

    if cfg.identity:
        state.key_blocks.append(k_win)
    elif cfg.key_requant == "frozen_incremental":
        block = quantize_key_block(k_win, cfg, state.frozen_partition)
        if state.frozen_partition is None:
            state.frozen_partition = block.partition
        state.key_blocks.append(block)
    else:
        # faithful mode: re-quantize the whole concatenated key
        prior = [_key_array(b) for b in state.key_blocks]
        full = np.concatenate(prior + [k_win.data.astype(np.float64)], axis=0)
        state.key_blocks = [quantize_key_block(KvSlab(full), cfg, None)]

    state.value_residual = state.value_residual.rows(n)
    state.key_residual = state.key_residual.rows(n)
    state.flush_count += 1
    state.invalidate()
    logger.debug("flushed %d tokens (flush #%d)", n, state.flush_count)
    return n


def decode_step(state: CacheState, q, k, v, fast: bool = True) -> np.ndarray:
    """One decoding step; returns the attention output for query ``q``.

    With ``fast`` the ternary value product runs as per-group add/sub of
    attention weights followed by one multiply per group scale.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float32).ravel()
    v = np.asarray(v, dtype=np.float32).ravel()
    C = state.channels
    if not (q.size == k.size == v.size == C):
        raise GeometryError(f"decode vectors must have width {C}")
    state.key_residual = state.key_residual.append(k)
    state.value_residual = state.value_residual.append(v)

    keys = state.key_matrix()
    w = softmax(keys @ q / np.sqrt(C))
    out = np.zeros(C)
    pos = 0
    for block in state.value_blocks:
        wb = w[pos:pos + block.tokens]
        if isinstance(block, KvSlab):
            out += wb @ block.data.astype(np.float64)
        else:
            out += value_weighted_sum(block, wb, fast=fast)
        pos += block.tokens
    out += w[pos:] @ state.value_residual.data.astype(np.float64)

    state.tokens_seen += 1
    if state.value_residual.tokens >= state.config.R:
        flush_residual(state)
    return out


def run_decode(state: CacheState, trace: DecodeTrace, fast: bool = True) -> np.ndarray:
    return np.stack([decode_step(state, s.q, s.k, s.v, fast) for s in trace]) if len(trace) \
        else np.zeros((0, state.channels))


def reference_decode(K: KvSlab, V: KvSlab, trace: DecodeTrace) -> np.ndarray:
    """Full-precision attention outputs for every step of ``trace``."""
    keys = np.concatenate([K.data, trace.k], axis=0).astype(np.float64)
    vals = np.concatenate([V.data, trace.v], axis=0).astype(np.float64)
    l = K.tokens
    return np.stack([
        attention_reference(trace.q[i], keys[: l + i + 1], vals[: l + i + 1]) for i in range(trace.steps)
    ]) if trace.steps else np.zeros((0, K.channels))
