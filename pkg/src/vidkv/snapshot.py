"""KVSNAP01 cache snapshots: byte-deterministic serialization of a CacheState.

Layout (all integers uint32 LE unless noted, floats float32 LE)::

    b"KVSNAP01"
    config_len, config JSON (sorted keys, compact, UTF-8)
    channels, system_len, vision_len, text_len, tokens_seen, flush_count
    frozen partition: u8 present [, partition]
    protected: count, float64 p, count * uint32 index
    n_key_blocks, key blocks...
    n_value_blocks, value blocks...
    key residual (KVT bytes), value residual (KVT bytes)

Each block starts with a one-byte tag (see ``TAG_*``). A partition is
``channels, float64 k, ceil(channels/8) mask bytes (LSB-first)``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .cache_engine import CacheState
from .config import QuantConfig
from .errors import FormatError
from .key_quant import ChannelPartition, FftSignBlock, QuantizedKeyBlock
from .quant_core import AXES, GroupGeometry, PackedBlock, TernaryBlock
from .tensor_io import HEADER, KvSlab, SegmentSpec, slab_from_bytes
from .value_quant import ProtectedSet, QuantizedValueBlock

MAGIC = b"KVSNAP01"
TAG_NONE, TAG_PACKED, TAG_TERNARY, TAG_FFT, TAG_KEY, TAG_VALUE, TAG_RAW = range(7)


class _Writer:
    def __init__(self) -> None:
        self.buf = io.BytesIO()

    def u8(self, x: int) -> None:
        self.buf.write(struct.pack("<B", x))

    def u32(self, x: int) -> None:
        self.buf.write(struct.pack("<I", x))

    def f64(self, x: float) -> None:
        self.buf.write(struct.pack("<d", x))

    def raw(self, b: bytes) -> None:
        self.buf.write(b)

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.raw(b)

    def f32s(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype="<f4")
        self.u32(arr.size)
        self.raw(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("snapshot truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def f32s(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def slab(self) -> KvSlab:
        start = self.pos
        self.take(HEADER.size)
        _, tokens, channels = HEADER.unpack_from(self.data, start)
        self.take(4 * tokens * channels)
        return slab_from_bytes(self.data[start:self.pos])


def _write_partition(w: _Writer, part: ChannelPartition) -> None:
    w.u32(part.channels)
    w.f64(part.k)
    w.raw(np.packbits(part.anomalous_mask.astype(np.uint8), bitorder="little").tobytes())


def _read_partition(r: _Reader) -> ChannelPartition:
    channels = r.u32()
    k = r.f64()
    bits = np.unpackbits(np.frombuffer(r.take(-(-channels // 8)), np.uint8), bitorder="little")
    return ChannelPartition(bits[:channels].astype(bool), k)


def _write_geometry(w: _Writer, g: GroupGeometry) -> None:
    w.u8(AXES.index(g.axis))
    w.u32(g.group_size)


def _read_geometry(r: _Reader) -> GroupGeometry:
    return GroupGeometry(AXES[r.u8()], r.u32())


def _write_block(w: _Writer, block) -> None:
    if block is None:
        w.u8(TAG_NONE)
    elif isinstance(block, KvSlab):
        w.u8(TAG_RAW)
        w.raw(block.to_bytes())
    elif isinstance(block, PackedBlock):
        w.u8(TAG_PACKED)
        w.u8(block.n_bits)
        _write_geometry(w, block.geometry)
        w.u32(block.tokens)
        w.u32(block.channels)
        w.f32s(block.scales)
        w.f32s(block.zeros)
        w.blob(block.codes)
    elif isinstance(block, TernaryBlock):
        w.u8(TAG_TERNARY)
        _write_geometry(w, block.geometry)
        w.u32(block.tokens)
        w.u32(block.channels)
        w.f32s(block.scales)
        w.u32(block.n_digits)
        w.u8(block.pad)
        w.blob(block.digits)
    elif isinstance(block, FftSignBlock):
        w.u8(TAG_FFT)
        w.u32(block.group_size)
        w.u32(block.tokens)
        w.u32(block.channels)
        w.f32s(block.scales)
        w.blob(block.sign_bits)
    elif isinstance(block, QuantizedKeyBlock):
        w.u8(TAG_KEY)
        w.u32(block.tokens)
        w.u32(block.channels)
        _write_partition(w, block.partition)
        _write_block(w, block.anomalous)
        _write_block(w, block.normal)
    elif isinstance(block, QuantizedValueBlock):
        w.u8(TAG_VALUE)
        w.u32(block.tokens)
        w.u32(block.channels)
        w.u32(block.protected_rows.size)
        w.raw(np.asarray(block.protected_rows, dtype="<u4").tobytes())
        _write_block(w, block.main)
        _write_block(w, block.protected)
    else:
        raise TypeError(f"cannot serialize {type(block).__name__}")


def _read_block(r: _Reader):
    tag = r.u8()
    if tag == TAG_NONE:
        return None
    if tag == TAG_RAW:
        return r.slab()
    if tag == TAG_PACKED:
        n_bits = r.u8()
        geometry = _read_geometry(r)
        tokens, channels = r.u32(), r.u32()
        scales, zeros = r.f32s(), r.f32s()
        return PackedBlock(n_bits, geometry, r.blob(), scales, zeros, tokens, channels)
    if tag == TAG_TERNARY:
        geometry = _read_geometry(r)
        tokens, channels = r.u32(), r.u32()
        scales = r.f32s()
        n_digits, pad = r.u32(), r.u8()
        if n_digits != tokens * channels or pad != -n_digits % 5:
            raise FormatError("ternary block digit count inconsistent with its shape")
        return TernaryBlock(geometry, r.blob(), scales, tokens, channels)
    if tag == TAG_FFT:
        G, tokens, channels = r.u32(), r.u32(), r.u32()
        scales = r.f32s()
        return FftSignBlock(G, r.blob(), scales, tokens, channels)
    if tag == TAG_KEY:
        tokens, channels = r.u32(), r.u32()
        part = _read_partition(r)
        return QuantizedKeyBlock(part, _read_block(r), _read_block(r), tokens, channels)
    if tag == TAG_VALUE:
        tokens, channels = r.u32(), r.u32()
        n = r.u32()
        rows = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
        return QuantizedValueBlock(_read_block(r), _read_block(r), rows, tokens, channels)
    raise FormatError(f"unknown block tag {tag}")


def snapshot_bytes(state: CacheState) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.blob(state.config.to_json().encode())
    seg = state.segments
    for x in (state.channels, seg.system_len, seg.vision_len, seg.text_len, state.tokens_seen, state.flush_count):
        w.u32(x)
    if state.frozen_partition is None:
        w.u8(0)
    else:
        w.u8(1)
        _write_partition(w, state.frozen_partition)
    w.u32(len(state.protected))
    w.f64(state.protected.p)
    w.raw(np.asarray(state.protected.indices, dtype="<u4").tobytes())
    for blocks in (state.key_blocks, state.value_blocks):
        w.u32(len(blocks))
        for b in blocks:
            _write_block(w, b)
    w.raw(state.key_residual.to_bytes())
    w.raw(state.value_residual.to_bytes())
    return w.buf.getvalue()


def snapshot_from_bytes(data: bytes) -> CacheState:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise FormatError("bad snapshot magic")
    config = QuantConfig.from_dict(json.loads(r.blob().decode()))
    channels, l_s, l_v, l_t, seen, flushes = (r.u32() for _ in range(6))
    frozen = _read_partition(r) if r.u8() else None
    n_prot = r.u32()
    p = r.f64()
    prot = ProtectedSet(np.frombuffer(r.take(4 * n_prot), dtype="<u4").astype(np.int64), p)
    key_blocks = [_read_block(r) for _ in range(r.u32())]
    value_blocks = [_read_block(r) for _ in range(r.u32())]
    key_res, value_res = r.slab(), r.slab()
    if r.pos != len(data):
        raise FormatError("trailing bytes after snapshot")
    return CacheState(config, SegmentSpec(l_s, l_v, l_t), channels, key_blocks, value_blocks,
                      key_res, value_res, frozen, prot, seen, flushes)


def write_snapshot(state: CacheState, path: str | Path) -> None:
    Path(path).write_bytes(snapshot_bytes(state))


def read_snapshot(path: str | Path) -> CacheState:
    return snapshot_from_bytes(Path(path).read_bytes())


def describe(state: CacheState) -> str:
    """Human-readable dump used by ``vidkv inspect``."""
    cfg = state.config
    lines = [
        f"config: {cfg.to_json()}",
        f"channels={state.channels} tokens_seen={state.tokens_seen} flushes={state.flush_count}",
        f"segments: system={state.segments.system_len} vision={state.segments.vision_len} "
        f"text={state.segments.text_len}",
        f"residual tokens: key={state.key_residual.tokens} value={state.value_residual.tokens}",
        f"protected tokens: {len(state.protected)} (p={state.protected.p:g})",
    ]
    if state.frozen_partition is not None:
        lines.append(f"frozen partition anomalous channels: {state.frozen_partition.anomalous.tolist()}")
    for i, b in enumerate(state.key_blocks):
        if isinstance(b, KvSlab):
            lines.append(f"key[{i}]: raw {b.tokens}x{b.channels}")
            continue
        normal = type(b.normal).__name__ if b.normal is not None else "none"
        lines.append(
            f"key[{i}]: {b.tokens}x{b.channels} anomalous={b.partition.anomalous.tolist()} "
            f"normal_path={normal} code_bits/elem={b.code_bits / (b.tokens * b.channels):.4f}"
        )
    for i, b in enumerate(state.value_blocks):
        if isinstance(b, KvSlab):
            lines.append(f"value[{i}]: raw {b.tokens}x{b.channels}")
            continue
        main = type(b.main).__name__ if b.main is not None else "none"
        lines.append(
            f"value[{i}]: {b.tokens}x{b.channels} main={main} protected_rows={b.protected_rows.size} "
            f"code_bits/elem={b.code_bits / (b.tokens * b.channels):.4f}"
        )
    return "\n".join(lines)
