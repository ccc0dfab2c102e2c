"""Group-wise uniform n-bit quantization and the bit/trit packing codecs.

Group order inside a block: ``per_channel`` enumerates channels outermost and
token groups inside (group ``c * n_token_groups + g`` holds tokens
``g*G .. g*G+G-1`` of channel ``c``); ``per_token`` enumerates tokens outermost
and channel groups inside. Codes are packed LSB-first, one whole number of
bytes per group. Trits are packed five per byte (base 3) over the whole block.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CodeRangeError, GeometryError
from .tensor_io import KvSlab

AXES = ("per_channel", "per_token")
TRIT_WEIGHTS = np.array([1, 3, 9, 27, 81], dtype=np.int64)


@dataclass(frozen=True)
class GroupGeometry:
    axis: str = "per_channel"
    group_size: int = 32

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise GeometryError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.group_size < 1:
            raise GeometryError("group size must be >= 1")

    def extent(self, tokens: int, channels: int) -> int:
        """Length of the grouped axis."""
        return tokens if self.axis == "per_channel" else channels

    def n_groups(self, tokens: int, channels: int) -> int:
        G = self.group_size
        if self.axis == "per_channel":
            return channels * -(-tokens // G)
        return tokens * -(-channels // G)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# Grouping helpers
# ---------------------------------------------------------------------------


def to_groups(data: np.ndarray, geometry: GroupGeometry, allow_partial: bool = False) -> np.ndarray:
    """Reshape a (tokens, channels) array into (n_groups, G), NaN-padding a partial tail."""
    G = geometry.group_size
    arr = np.asarray(data, dtype=np.float64)
    if geometry.axis == "per_token":
        arr = arr.T
    # arr is now (extent, lanes): grouping runs down axis 0
    extent, lanes = arr.shape
    if extent % G and not allow_partial:
        raise GeometryError(f"grouped extent {extent} is not a multiple of G={G}")
    padded = -(-extent // G) * G
    if padded != extent:
        arr = np.concatenate([arr, np.full((padded - extent, lanes), np.nan)], axis=0)
    return arr.T.reshape(lanes * (padded // G), G)


def from_groups(groups: np.ndarray, geometry: GroupGeometry, tokens: int, channels: int) -> np.ndarray:
    G = geometry.group_size
    extent, lanes = (tokens, channels) if geometry.axis == "per_channel" else (channels, tokens)
    padded = -(-extent // G) * G
    arr = np.asarray(groups).reshape(lanes, padded).T[:extent]
    return arr if geometry.axis == "per_channel" else arr.T


# ---------------------------------------------------------------------------
# Bit / trit packing
# ---------------------------------------------------------------------------


def _bits_matrix(codes: np.ndarray, n_bits: int) -> np.ndarray:
    shifts = np.arange(n_bits, dtype=np.uint8)
    bits = (codes[..., None].astype(np.uint8) >> shifts) & 1
    return bits.reshape(*codes.shape[:-1], codes.shape[-1] * n_bits)


def pack_codes(codes, n_bits: int) -> bytes:
    """Pack integer codes LSB-first, ``n_bits`` per code."""
    if n_bits not in (1, 2):
        raise CodeRangeError(f"n_bits must be 1 or 2, got {n_bits}")
    arr = np.asarray(codes, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= 1 << n_bits):
        raise CodeRangeError(f"codes must lie in [0, {(1 << n_bits) - 1}]")
    return np.packbits(_bits_matrix(arr, n_bits), bitorder="little").tobytes()


def unpack_codes(buf: bytes, n_bits: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if bits.size < count * n_bits:
        raise CodeRangeError("buffer too short for requested code count")
    bits = bits[: count * n_bits].reshape(count, n_bits).astype(np.uint8)
    return (bits << np.arange(n_bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def pack_ternary(digits) -> bytes:
    """Base-3 pack: five digits per byte, byte = sum((d_i + 1) * 3**i)."""
    arr = np.asarray(digits, dtype=np.int64).ravel()
    if arr.size and (arr.min() < -1 or arr.max() > 1):
        raise CodeRangeError("ternary digits must be in {-1, 0, 1}")
    shifted = arr + 1
    pad = -arr.size % 5
    if pad:
        shifted = np.concatenate([shifted, np.zeros(pad, dtype=np.int64)])
    return (shifted.reshape(-1, 5) @ TRIT_WEIGHTS).astype(np.uint8).tobytes()


def unpack_ternary(buf: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8).astype(np.int64)
    if raw.size * 5 < count:
        raise CodeRangeError("buffer too short for requested digit count")
    if raw.size and raw.max() > 242:
        raise CodeRangeError("ternary byte exceeds 242")
    trits = (raw[:, None] // TRIT_WEIGHTS) % 3
    return (trits.ravel()[:count] - 1).astype(np.int8)


def ternary_pad(count: int) -> int:
    return -count % 5


# ---------------------------------------------------------------------------
# Uniform quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PackedBlock:
    """Uniform n-bit payload with one float32 scale and zero per group."""

    n_bits: int
    geometry: GroupGeometry
    codes: bytes
    scales: np.ndarray
    zeros: np.ndarray
    tokens: int
    channels: int

    @property
    def n_groups(self) -> int:
        return self.geometry.n_groups(self.tokens, self.channels)

    @property
    def bytes_per_group(self) -> int:
        return -(-self.geometry.group_size * self.n_bits // 8)

    def unpack(self) -> np.ndarray:
        """Codes as (n_groups, G) uint8, pad slots included (always 0)."""
        G, nb = self.geometry.group_size, self.bytes_per_group
        raw = np.frombuffer(self.codes, dtype=np.uint8).reshape(self.n_groups, nb)
        bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : G * self.n_bits]
        bits = bits.reshape(self.n_groups, G, self.n_bits)
        return (bits << np.arange(self.n_bits, dtype=np.uint8)).sum(axis=2).astype(np.uint8)

    def code_matrix(self) -> np.ndarray:
        """Codes laid out as (tokens, channels)."""
        return from_groups(self.unpack(), self.geometry, self.tokens, self.channels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PackedBlock):
            return NotImplemented
        return (
            (self.n_bits, self.geometry, self.codes, self.tokens, self.channels)
            == (other.n_bits, other.geometry, other.codes, other.tokens, other.channels)
            and self.scales.tobytes() == other.scales.tobytes()
            and self.zeros.tobytes() == other.zeros.tobytes()
        )


def uniform_quantize_array(data: np.ndarray, n_bits: int, geometry: GroupGeometry,
                           allow_partial: bool = False) -> PackedBlock:
    if n_bits not in (1, 2):
        raise CodeRangeError(f"n_bits must be 1 or 2, got {n_bits}")
    data = np.asarray(data, dtype=np.float32)
    tokens, channels = data.shape
    groups = to_groups(data, geometry, allow_partial)
    levels = (1 << n_bits) - 1
    if groups.shape[0]:
        lo = np.nanmin(groups, axis=1)
        hi = np.nanmax(groups, axis=1)
    else:
        lo = hi = np.zeros(0)
    # scale is rounded to float32 before use so stored metadata reproduces the codes exactly
    scales = ((hi - lo) / levels).astype(np.float32)
    zeros = lo.astype(np.float32)
    s = scales.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.floor((groups - zeros.astype(np.float64)[:, None]) / s + 0.5)
    q = np.where((s > 0) & np.isfinite(groups), np.clip(q, 0, levels), 0).astype(np.uint8)
    bits = _bits_matrix(q, n_bits)
    codes = np.packbits(bits, axis=1, bitorder="little").tobytes()
    return PackedBlock(n_bits, geometry, codes, scales, zeros, tokens, channels)


def uniform_quantize(window: KvSlab, n_bits: int, geometry: GroupGeometry = GroupGeometry(),
                     allow_partial: bool = False) -> PackedBlock:
    """Min/max quantization: ``code = clamp(round((x - min) / s), 0, 2^n - 1)``.

    A constant group gets ``s = 0`` and all-zero codes. ``allow_partial`` lets the
    last group along the grouped axis be short; its statistics use real elements only.
    """
    return uniform_quantize_array(window.data, n_bits, geometry, allow_partial)


def uniform_dequantize_array(block: PackedBlock) -> np.ndarray:
    """float64 reconstruction ``code * s + z`` shaped (tokens, channels)."""
    q = block.unpack().astype(np.float64)
    vals = q * block.scales.astype(np.float64)[:, None] + block.zeros.astype(np.float64)[:, None]
    return from_groups(vals, block.geometry, block.tokens, block.channels)


def uniform_dequantize(block: PackedBlock) -> KvSlab:
    return KvSlab(uniform_dequantize_array(block))


# ---------------------------------------------------------------------------
# Ternary payload
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TernaryBlock:
    """Ternary digits (base-3 packed, pads skipped) with one float32 scale per group."""

    geometry: GroupGeometry
    digits: bytes
    scales: np.ndarray
    tokens: int
    channels: int

    @property
    def n_digits(self) -> int:
        return self.tokens * self.channels

    @property
    def pad(self) -> int:
        return ternary_pad(self.n_digits)

    @property
    def n_groups(self) -> int:
        return self.geometry.n_groups(self.tokens, self.channels)

    def digit_groups(self) -> np.ndarray:
        """Digits as (n_groups, G) int8 with pad slots set to 0."""
        return self._digit_groups.copy()

    @cached_property
    def _digit_groups(self) -> np.ndarray:
        G = self.geometry.group_size
        valid = ~np.isnan(to_groups(np.zeros((self.tokens, self.channels)), self.geometry, True))
        out = np.zeros((self.n_groups, G), dtype=np.int8)
        out[valid] = unpack_ternary(self.digits, self.n_digits)
        return out

    def digit_matrix(self) -> np.ndarray:
        return from_groups(self.digit_groups(), self.geometry, self.tokens, self.channels)

    def scale_matrix(self) -> np.ndarray:
        """Per-element scale (tokens, channels), float64."""
        G = self.geometry.group_size
        per = np.repeat(self.scales.astype(np.float64)[:, None], G, axis=1)
        return from_groups(per, self.geometry, self.tokens, self.channels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TernaryBlock):
            return NotImplemented
        return (
            (self.geometry, self.digits, self.tokens, self.channels)
            == (other.geometry, other.digits, other.tokens, other.channels)
            and self.scales.tobytes() == other.scales.tobytes()
        )


def ternary_from_groups(digit_groups: np.ndarray, scales: np.ndarray, geometry: GroupGeometry,
                        tokens: int, channels: int) -> TernaryBlock:
    valid = ~np.isnan(to_groups(np.zeros((tokens, channels)), geometry, True))
    payload = pack_ternary(digit_groups[valid])
    return TernaryBlock(geometry, payload, np.asarray(scales, dtype=np.float32), tokens, channels)
