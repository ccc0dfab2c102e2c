"""Ternary value quantization and semantic token protection (STP).

A ternary digit reconstructs as ``digit * s`` where ``s`` is the group's mean
absolute value; the threshold is ``gamma * s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, SpanIndexError
from .quant_core import (
    GroupGeometry,
    PackedBlock,
    TernaryBlock,
    from_groups,
    ternary_from_groups,
    to_groups,
    uniform_dequantize_array,
    uniform_quantize_array,
)
from .tensor_io import KvSlab


@dataclass(frozen=True)
class TernaryParams:
    gamma: float = 0.7
    geometry: GroupGeometry = GroupGeometry()

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


def ternary_quantize_array(data: np.ndarray, params: TernaryParams = TernaryParams(),
                           allow_partial: bool = False) -> TernaryBlock:
    data = np.asarray(data, dtype=np.float32)
    tokens, channels = data.shape
    groups = to_groups(data, params.geometry, allow_partial)
    if groups.shape[0]:
        scales = np.nanmean(np.abs(groups), axis=1).astype(np.float32)
    else:
        scales = np.zeros(0, dtype=np.float32)
    alpha = params.gamma * scales.astype(np.float64)[:, None]
    with np.errstate(invalid="ignore"):
        digits = np.where(groups > alpha, 1, np.where(groups < -alpha, -1, 0)).astype(np.int8)
    return ternary_from_groups(digits, scales, params.geometry, tokens, channels)


def ternary_quantize(window: KvSlab, params: TernaryParams = TernaryParams(),
                     allow_partial: bool = False) -> TernaryBlock:
    """Per group: ``s = mean|v|``, ``alpha = gamma * s``; digit = sign(v) where |v| > alpha."""
    return ternary_quantize_array(window.data, params, allow_partial)


def ternary_dequantize_array(block: TernaryBlock) -> np.ndarray:
    vals = block.digit_groups().astype(np.float64) * block.scales.astype(np.float64)[:, None]
    return from_groups(vals, block.geometry, block.tokens, block.channels)


def ternary_dequantize(block: TernaryBlock) -> KvSlab:
    return KvSlab(ternary_dequantize_array(block))


def ternary_weighted_sum(block: TernaryBlock, weights: np.ndarray) -> np.ndarray:
    """``weights @ dequant(block)`` without multiplying by digits.

    Per group, the attention weights of +1 digits are added and those of -1
    digits subtracted; the group scale is applied once to the accumulated sum.
    """
    w = np.asarray(weights, dtype=np.float64)
    digits = block.digit_matrix()
    plus, minus = digits == 1, digits == -1
    G = block.geometry.group_size
    T, C = block.tokens, block.channels
    if block.geometry.axis == "per_channel":
        n_tg = -(-T // G)
        pad = n_tg * G - T
        wp = np.concatenate([w, np.zeros(pad)])
        plus = np.concatenate([plus, np.zeros((pad, C), bool)])
        minus = np.concatenate([minus, np.zeros((pad, C), bool)])
        wg = np.broadcast_to(wp.reshape(n_tg, G, 1), (n_tg, G, C))
        acc = np.where(plus.reshape(n_tg, G, C), wg, 0.0).sum(axis=1) \
            - np.where(minus.reshape(n_tg, G, C), wg, 0.0).sum(axis=1)
        scales = block.scales.astype(np.float64).reshape(C, n_tg).T
        return (acc * scales).sum(axis=0)
    # per_token: each token's weight is scaled once per channel-group, then add/sub
    n_cg = -(-C // G)
    scales = block.scales.astype(np.float64).reshape(T, n_cg)
    ws = np.repeat(w[:, None] * scales, G, axis=1)[:, :C]
    return np.where(plus, ws, 0.0).sum(axis=0) - np.where(minus, ws, 0.0).sum(axis=0)


# ---------------------------------------------------------------------------
# Semantic token protection
# ---------------------------------------------------------------------------


def importance_scores(X_v: KvSlab, X_t: KvSlab) -> np.ndarray:
    """Mean over text tokens of the dot product with each vision token."""
    if X_v.channels != X_t.channels:
        raise GeometryError("vision and text features must share channel count")
    xv = np.asarray(X_v.data, dtype=np.float64)
    xt = np.asarray(X_t.data, dtype=np.float64)
    if xt.shape[0] == 0:
        return np.zeros(xv.shape[0])
    return (xv @ xt.T).mean(axis=1)


@dataclass(frozen=True, eq=False)
class ProtectedSet:
    indices: np.ndarray
    p: float

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProtectedSet):
            return NotImplemented
        return self.p == other.p and np.array_equal(self.indices, other.indices)

    @classmethod
    def empty(cls) -> "ProtectedSet":
        return cls(np.zeros(0, dtype=np.int64), 0.0)


def select_protected(scores, p: float, l_s: int, l_v: int) -> ProtectedSet:
    """Top round(p * l_v) vision tokens by score, returned sorted and offset by ``l_s``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != l_v:
        raise GeometryError(f"expected {l_v} vision scores, got {scores.size}")
    n = int(np.floor(p * l_v + 0.5))
    order = np.lexsort((np.arange(l_v), -scores))
    return ProtectedSet(np.sort(order[:n]).astype(np.int64) + l_s, p)


@dataclass(frozen=True, eq=False)
class QuantizedValueBlock:
    """Value rows split into a main payload and 2-bit protected rows.

    ``protected_rows`` are row indices relative to the block's first token.
    """

    main: TernaryBlock | PackedBlock | None
    protected: PackedBlock | None
    protected_rows: np.ndarray
    tokens: int
    channels: int

    @property
    def main_rows(self) -> np.ndarray:
        keep = np.ones(self.tokens, dtype=bool)
        keep[self.protected_rows] = False
        return np.flatnonzero(keep)

    @property
    def code_bits(self) -> float:
        n_prot = self.protected_rows.size
        bits = 2 * n_prot * self.channels
        if isinstance(self.main, TernaryBlock):
            bits += len(self.main.digits) * 8
        elif self.main is not None:
            bits += self.main.n_bits * self.main.tokens * self.main.channels
        return bits

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedValueBlock):
            return NotImplemented
        return (
            self.main == other.main
            and self.protected == other.protected
            and np.array_equal(self.protected_rows, other.protected_rows)
            and (self.tokens, self.channels) == (other.tokens, other.channels)
        )


MAIN_MODES = ("ternary", "uniform2", "uniform2_per_token", "uniform1")


def _quantize_main(data: np.ndarray, mode: str, params: TernaryParams):
    G = params.geometry.group_size
    if mode == "ternary":
        return ternary_quantize_array(data, params, allow_partial=True)
    if mode == "uniform2":
        return uniform_quantize_array(data, 2, GroupGeometry("per_channel", G), allow_partial=True)
    if mode == "uniform2_per_token":
        return uniform_quantize_array(data, 2, GroupGeometry("per_token", G), allow_partial=True)
    if mode == "uniform1":
        return uniform_quantize_array(data, 1, GroupGeometry("per_channel", G), allow_partial=True)
    raise ValueError(f"unknown value mode {mode!r}")


def quantize_value_block(window: KvSlab, params: TernaryParams = TernaryParams(),
                         protected: ProtectedSet | None = None, offset: int = 0,
                         mode: str = "ternary") -> QuantizedValueBlock:
    """Protected rows go to 2-bit per-channel groups formed among themselves.

    ``offset`` is the absolute index of the window's first token, so protected
    indices refer to the full sequence. Remaining rows use ``mode``.
    """
    T = window.tokens
    rows = np.zeros(0, dtype=np.int64)
    if protected is not None and len(protected):
        rows = np.asarray(protected.indices, dtype=np.int64) - offset
        if rows.min() < 0 or rows.max() >= T:
            raise SpanIndexError("protected token index outside the window span")
        rows = np.unique(rows)
    keep = np.ones(T, dtype=bool)
    keep[rows] = False
    data = window.data
    main = _quantize_main(data[keep], mode, params) if keep.any() else None
    prot = None
    if rows.size:
        geometry = GroupGeometry("per_channel", params.geometry.group_size)
        prot = uniform_quantize_array(data[rows], 2, geometry, allow_partial=True)
    return QuantizedValueBlock(main, prot, rows, T, window.channels)


def _main_array(main) -> np.ndarray:
    if isinstance(main, TernaryBlock):
        return ternary_dequantize_array(main)
    return uniform_dequantize_array(main)


def dequantize_value_array(block: QuantizedValueBlock) -> np.ndarray:
    out = np.zeros((block.tokens, block.channels), dtype=np.float64)
    if block.main is not None:
        out[block.main_rows] = _main_array(block.main)
    if block.protected is not None:
        out[block.protected_rows] = uniform_dequantize_array(block.protected)
    return out


def dequantize_value_block(block: QuantizedValueBlock) -> KvSlab:
    return KvSlab(dequantize_value_array(block))


def value_weighted_sum(block: QuantizedValueBlock, weights: np.ndarray, fast: bool = True) -> np.ndarray:
    """``weights @ dequant(block)``; with ``fast`` the ternary part uses add/sub accumulation."""
    w = np.asarray(weights, dtype=np.float64)
    if not fast:
        return w @ dequantize_value_array(block)
    out = np.zeros(block.channels)
    if isinstance(block.main, TernaryBlock):
        out += ternary_weighted_sum(block.main, w[block.main_rows])
    elif block.main is not None:
        out += w[block.main_rows] @ uniform_dequantize_array(block.main)
    if block.protected is not None:
        out += w[block.protected_rows] @ uniform_dequantize_array(block.protected)
    return out
