"""Mixed-precision key quantization.

Channels are scored, the top-k fraction goes to 2-bit per-channel groups and the
remainder to 1-bit, either plain uniform or sign coding of the channel-group's
half spectrum. For a real window of length G the half spectrum holds exactly G
independent real numbers (real parts of bins 0..G//2, imaginary parts of the
bins strictly between DC and Nyquist), which is what keeps that path at one
bit per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import QuantConfig
from .errors import GeometryError
from .quant_core import (
    GroupGeometry,
    PackedBlock,
    from_groups,
    to_groups,
    uniform_dequantize_array,
    uniform_quantize_array,
)
from .tensor_io import KvSlab


@dataclass(frozen=True, eq=False)
class ChannelScore:
    metric: str
    values: np.ndarray
    M: float = 3.0


@dataclass(frozen=True, eq=False)
class ChannelPartition:
    anomalous_mask: np.ndarray
    k: float

    @property
    def channels(self) -> int:
        return self.anomalous_mask.size

    @property
    def anomalous(self) -> np.ndarray:
        return np.flatnonzero(self.anomalous_mask)

    @property
    def normal(self) -> np.ndarray:
        return np.flatnonzero(~self.anomalous_mask)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChannelPartition):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.anomalous_mask, other.anomalous_mask)


def score_channels(window: KvSlab, metric: str = "range", M: float = 3.0) -> ChannelScore:
    data = np.asarray(window.data, dtype=np.float64)
    if data.shape[0] == 0:
        raise GeometryError("cannot score an empty window")
    if metric == "range":
        values = data.max(axis=0) - data.min(axis=0)
    elif metric == "variance":
        values = data.var(axis=0)
    elif metric == "outlier_count":
        values = (data > M * data.mean(axis=0)).sum(axis=0).astype(np.float64)
    else:
        raise ValueError(f"unknown channel metric {metric!r}")
    return ChannelScore(metric, values, M)


def anomalous_count(k: float, channels: int) -> int:
    return int(np.floor(k * channels + 0.5))


def partition_channels(scores: ChannelScore, k: float) -> ChannelPartition:
    """Top round(k * C) scores are anomalous; equal scores favour the lower index."""
    values = np.asarray(scores.values)
    n = anomalous_count(k, values.size)
    order = np.lexsort((np.arange(values.size), -values))
    mask = np.zeros(values.size, dtype=bool)
    mask[order[:n]] = True
    return ChannelPartition(mask, k)


# ---------------------------------------------------------------------------
# Half-spectrum sign coding
# ---------------------------------------------------------------------------


def _imag_bins(G: int) -> slice:
    return slice(1, (G + 1) // 2)


def spectrum_components(windows: np.ndarray) -> np.ndarray:
    """(n, G) real windows -> (n, G) stored spectral components."""
    windows = np.asarray(windows, dtype=np.float64)
    G = windows.shape[-1]
    spec = np.fft.rfft(windows, axis=-1)
    return np.concatenate([spec.real, spec.imag[..., _imag_bins(G)]], axis=-1)


def components_to_windows(comps: np.ndarray, G: int) -> np.ndarray:
    comps = np.asarray(comps, dtype=np.float64)
    n_bins = G // 2 + 1
    spec = np.zeros(comps.shape[:-1] + (n_bins,), dtype=np.complex128)
    spec.real = comps[..., :n_bins]
    spec.imag[..., _imag_bins(G)] = comps[..., n_bins:]
    return np.fft.irfft(spec, n=G, axis=-1)


def fft_sign_quantize(channel_window) -> tuple[np.ndarray, float]:
    """Return (bits, s_fft): bit = 1 iff the component is >= 0, s_fft = mean |component|."""
    x = np.asarray(channel_window, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise GeometryError("fft_sign_quantize expects a non-empty 1-D window")
    comps = spectrum_components(x[None, :])[0]
    return (comps >= 0).astype(np.uint8), float(np.float32(np.abs(comps).mean()))


def fft_sign_dequantize(sign_bits, s_fft: float, G: int) -> np.ndarray:
    bits = np.asarray(sign_bits, dtype=np.float64)
    if bits.size != G:
        raise GeometryError(f"expected {G} sign bits, got {bits.size}")
    return components_to_windows((2.0 * bits - 1.0) * s_fft, G)


@dataclass(frozen=True, eq=False)
class FftSignBlock:
    """G sign bits per (channel, token-group) plus one float32 scale each."""

    group_size: int
    sign_bits: bytes
    scales: np.ndarray
    tokens: int
    channels: int

    @property
    def geometry(self) -> GroupGeometry:
        return GroupGeometry("per_channel", self.group_size)

    @property
    def n_groups(self) -> int:
        return self.geometry.n_groups(self.tokens, self.channels)

    def bit_groups(self) -> np.ndarray:
        G = self.group_size
        nb = -(-G // 8)
        raw = np.frombuffer(self.sign_bits, dtype=np.uint8).reshape(self.n_groups, nb)
        return np.unpackbits(raw, axis=1, bitorder="little")[:, :G]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FftSignBlock):
            return NotImplemented
        return (
            (self.group_size, self.sign_bits, self.tokens, self.channels)
            == (other.group_size, other.sign_bits, other.tokens, other.channels)
            and self.scales.tobytes() == other.scales.tobytes()
        )


def fft_quantize_array(data: np.ndarray, G: int) -> FftSignBlock:
    data = np.asarray(data, dtype=np.float32)
    tokens, channels = data.shape
    geometry = GroupGeometry("per_channel", G)
    groups = to_groups(data, geometry)
    comps = spectrum_components(groups)
    bits = (comps >= 0).astype(np.uint8)
    scales = np.abs(comps).mean(axis=1).astype(np.float32) if comps.size else np.zeros(0, np.float32)
    packed = np.packbits(bits, axis=1, bitorder="little").tobytes()
    return FftSignBlock(G, packed, scales, tokens, channels)


def fft_dequantize_array(block: FftSignBlock) -> np.ndarray:
    G = block.group_size
    comps = (2.0 * block.bit_groups() - 1.0) * block.scales.astype(np.float64)[:, None]
    windows = components_to_windows(comps, G)
    return from_groups(windows, block.geometry, block.tokens, block.channels)


# ---------------------------------------------------------------------------
# Key blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedKeyBlock:
    partition: ChannelPartition
    anomalous: PackedBlock | None
    normal: FftSignBlock | PackedBlock | None
    tokens: int
    channels: int

    @property
    def code_bits(self) -> int:
        n_anom = int(self.partition.anomalous_mask.sum())
        return self.tokens * (2 * n_anom + (self.channels - n_anom))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedKeyBlock):
            return NotImplemented
        return (
            self.partition == other.partition
            and self.anomalous == other.anomalous
            and self.normal == other.normal
            and (self.tokens, self.channels) == (other.tokens, other.channels)
        )


def quantize_key_block(window: KvSlab, config: QuantConfig = QuantConfig(),
                       frozen_partition: ChannelPartition | None = None) -> QuantizedKeyBlock:
    G = config.G
    if window.tokens % G:
        raise GeometryError(f"key window of {window.tokens} tokens is not a multiple of G={G}")
    if frozen_partition is None:
        scores = score_channels(window, config.key_metric, config.key_M)
        partition = partition_channels(scores, config.key_k)
    else:
        if frozen_partition.channels != window.channels:
            raise GeometryError("frozen partition width does not match the window")
        partition = frozen_partition
    data = window.data
    geometry = GroupGeometry("per_channel", G)
    anom_idx, norm_idx = partition.anomalous, partition.normal
    anomalous = uniform_quantize_array(data[:, anom_idx], 2, geometry) if anom_idx.size else None
    normal: FftSignBlock | PackedBlock | None = None
    if norm_idx.size:
        if config.fft_enabled:
            normal = fft_quantize_array(data[:, norm_idx], G)
        else:
            normal = uniform_quantize_array(data[:, norm_idx], 1, geometry)
    return QuantizedKeyBlock(partition, anomalous, normal, window.tokens, window.channels)


def dequantize_key_array(block: QuantizedKeyBlock) -> np.ndarray:
    out = np.zeros((block.tokens, block.channels), dtype=np.float64)
    if block.anomalous is not None:
        out[:, block.partition.anomalous] = uniform_dequantize_array(block.anomalous)
    if isinstance(block.normal, FftSignBlock):
        out[:, block.partition.normal] = fft_dequantize_array(block.normal)
    elif block.normal is not None:
        out[:, block.partition.normal] = uniform_dequantize_array(block.normal)
    return out


def dequantize_key_block(block: QuantizedKeyBlock) -> KvSlab:
    return KvSlab(dequantize_key_array(block))
