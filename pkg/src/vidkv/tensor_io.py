"""Dense KV slabs, the KVT on-disk format, decode traces and synthetic workloads.

KVT layout (little-endian throughout)::

    bytes 0-7    b"KVTENS01"
    bytes 8-11   tokens   (uint32)
    bytes 12-15  channels (uint32)
    bytes 16-    tokens * channels float32, token-major

A decode trace reuses the header, appends a uint32 stream count (always 3)
and then stores, per step, the q, k and v vectors back to back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, FormatError, GeometryError, LengthError, SpecError

MAGIC = b"KVTENS01"
HEADER = struct.Struct("<8sII")
STREAM_COUNT = struct.Struct("<I")
F32 = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class KvSlab:
    """Token x channel float32 matrix for one (layer, head) key or value segment.

    The backing array is copied, made read-only and checked for finiteness.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise GeometryError(f"slab must be 2-D (tokens, channels), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("slab contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def empty(cls, channels: int) -> "KvSlab":
        return cls(np.zeros((0, channels), dtype=np.float32))

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def rows(self, start: int, stop: int | None = None) -> "KvSlab":
        return KvSlab(self.data[start:stop])

    def append(self, other: "KvSlab | np.ndarray") -> "KvSlab":
        extra = other.data if isinstance(other, KvSlab) else np.asarray(other, dtype=np.float32)
        extra = extra.reshape(-1, self.channels)
        return KvSlab(np.concatenate([self.data, extra], axis=0))

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, self.tokens, self.channels) + self.data.astype(F32).tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KvSlab):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self) -> int:
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True)
class SegmentSpec:
    """Lengths of the system / vision / text token segments of a prefill."""

    system_len: int
    vision_len: int
    text_len: int

    def __post_init__(self) -> None:
        if min(self.system_len, self.vision_len, self.text_len) < 0:
            raise SpecError("segment lengths must be non-negative")

    @property
    def total(self) -> int:
        return self.system_len + self.vision_len + self.text_len

    @property
    def vision_slice(self) -> slice:
        return slice(self.system_len, self.system_len + self.vision_len)

    @property
    def text_slice(self) -> slice:
        start = self.system_len + self.vision_len
        return slice(start, start + self.text_len)

    def check(self, tokens: int) -> None:
        if self.total != tokens:
            raise SpecError(f"segments sum to {self.total}, slab has {tokens} tokens")

    @classmethod
    def vision_only(cls, tokens: int) -> "SegmentSpec":
        return cls(0, tokens, 0)


@dataclass(frozen=True)
class DecodeStep:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class DecodeTrace:
    """Ordered (q, k, v) vectors fed to the decoder one step at a time."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        arrs = [np.array(a, dtype=np.float32) for a in (self.q, self.k, self.v)]
        arrs = [a if a.ndim == 2 else a.reshape(len(a), -1) for a in arrs]
        if len({a.shape for a in arrs}) != 1:
            raise GeometryError("q, k and v streams must share shape (steps, channels)")
        for a in arrs:
            if not np.all(np.isfinite(a)):
                raise DataError("trace contains non-finite values")
            a.setflags(write=False)
        object.__setattr__(self, "q", arrs[0])
        object.__setattr__(self, "k", arrs[1])
        object.__setattr__(self, "v", arrs[2])

    @property
    def steps(self) -> int:
        return self.q.shape[0]

    @property
    def channels(self) -> int:
        return self.q.shape[1]

    def __len__(self) -> int:
        return self.steps

    def __iter__(self) -> Iterator[DecodeStep]:
        for i in range(self.steps):
            yield DecodeStep(self.q[i], self.k[i], self.v[i])


def _parse_header(buf: bytes) -> tuple[int, int]:
    if len(buf) < HEADER.size:
        raise FormatError("file shorter than the 16-byte KVT header")
    magic, tokens, channels = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    return tokens, channels


def slab_from_bytes(buf: bytes) -> KvSlab:
    tokens, channels = _parse_header(buf)
    expected = HEADER.size + tokens * channels * F32.itemsize
    if len(buf) != expected:
        raise LengthError(f"declared {tokens}x{channels} needs {expected} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype=F32, offset=HEADER.size).reshape(tokens, channels)
    return KvSlab(data)


def kvt_read(path: str | Path) -> KvSlab:
    return slab_from_bytes(Path(path).read_bytes())


def kvt_write(slab: KvSlab, path: str | Path) -> None:
    # KvSlab construction already rejects NaN/Inf, so raw arrays are validated first
    if not isinstance(slab, KvSlab):
        slab = KvSlab(slab)
    Path(path).write_bytes(slab.to_bytes())


def trace_to_bytes(trace: DecodeTrace) -> bytes:
    body = np.concatenate([trace.q, trace.k, trace.v], axis=1).astype(F32)
    return HEADER.pack(MAGIC, trace.steps, trace.channels) + STREAM_COUNT.pack(3) + body.tobytes()


def trace_from_bytes(buf: bytes) -> DecodeTrace:
    steps, channels = _parse_header(buf)
    if len(buf) < HEADER.size + STREAM_COUNT.size:
        raise LengthError("trace header missing stream count")
    (streams,) = STREAM_COUNT.unpack_from(buf, HEADER.size)
    if streams != 3:
        raise FormatError(f"trace stream count must be 3, got {streams}")
    offset = HEADER.size + STREAM_COUNT.size
    expected = offset + steps * 3 * channels * F32.itemsize
    if len(buf) != expected:
        raise LengthError(f"trace declares {steps} steps needing {expected} bytes, file has {len(buf)}")
    body = np.frombuffer(buf, dtype=F32, offset=offset).reshape(steps, 3, channels)
    return DecodeTrace(body[:, 0], body[:, 1], body[:, 2])


def read_trace(path: str | Path) -> DecodeTrace:
    return trace_from_bytes(Path(path).read_bytes())


def write_trace(trace: DecodeTrace, path: str | Path) -> None:
    Path(path).write_bytes(trace_to_bytes(trace))


# ---------------------------------------------------------------------------
# Synthetic workloads
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("gaussian_outlier_channels", "gaussian_outlier_tokens", "periodic_frames", "uniform_noise")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic slab.

    ``noise`` only affects ``periodic_frames`` (std of the per-frame jitter).
    All randomness comes from numpy's PCG64 bit generator seeded with ``seed``.
    """

    kind: str
    tokens: int
    channels: int
    outlier_count: int = 0
    outlier_magnitude: float = 1.0
    frame_len: int = 1
    seed: int = 0
    noise: float = 0.05

    def validate(self) -> None:
        if self.kind not in SYNTH_KINDS:
            raise SpecError(f"unknown synthetic kind {self.kind!r}")
        if self.tokens < 0 or self.channels < 1:
            raise SpecError("tokens must be >= 0 and channels >= 1")
        if self.outlier_count < 0:
            raise SpecError("outlier_count must be >= 0")
        if self.kind == "gaussian_outlier_channels" and self.outlier_count > self.channels:
            raise SpecError("outlier_count exceeds channels")
        if self.kind == "gaussian_outlier_tokens" and self.outlier_count > self.tokens:
            raise SpecError("outlier_count exceeds tokens")
        if self.kind == "periodic_frames":
            if self.frame_len < 1 or self.tokens % self.frame_len:
                raise SpecError("frame_len must divide tokens for periodic_frames")
        if self.noise < 0:
            raise SpecError("noise must be >= 0")

    def with_seed(self, seed: int) -> "SynthSpec":
        return SynthSpec(**{**self.__dict__, "seed": seed})


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & 0xFFFF_FFFF_FFFF_FFFF))


def outlier_indices(spec: SynthSpec) -> np.ndarray:
    """Indices (channels or tokens) that gen_synthetic scales for this spec."""
    rng = make_rng(spec.seed)
    return _draw(spec, rng)[1]


def _draw(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t, c = spec.tokens, spec.channels
    idx = np.zeros(0, dtype=np.int64)
    if spec.kind == "gaussian_outlier_channels":
        data = rng.standard_normal((t, c))
        idx = np.sort(rng.choice(c, size=spec.outlier_count, replace=False))
        data[:, idx] *= spec.outlier_magnitude
    elif spec.kind == "gaussian_outlier_tokens":
        data = rng.standard_normal((t, c))
        idx = np.sort(rng.choice(t, size=spec.outlier_count, replace=False))
        data[idx, :] *= spec.outlier_magnitude
    elif spec.kind == "periodic_frames":
        base = rng.standard_normal((spec.frame_len, c))
        frames = t // spec.frame_len
        data = np.tile(base, (frames, 1)) + spec.noise * rng.standard_normal((t, c))
    else:
        data = rng.uniform(-1.0, 1.0, (t, c))
    return data, idx


def gen_synthetic(spec: SynthSpec) -> KvSlab:
    spec.validate()
    data, _ = _draw(spec, make_rng(spec.seed))
    return KvSlab(data)


def gen_trace(steps: int, channels: int, seed: int, scale: float = 1.0) -> DecodeTrace:
    """Standard-normal q/k/v streams; used by the simulator and sweeps."""
    rng = make_rng(seed)
    q, k, v = (scale * rng.standard_normal((steps, channels)) for _ in range(3))
    return DecodeTrace(q, k, v)
