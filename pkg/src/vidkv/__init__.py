"""Low-bit KV-cache quantization for video LLM attention, simulated at desk scale."""

from .cache_engine import CacheState, attention_reference, decode_step, flush_residual, prefill
from .config import QuantConfig
from .errors import VidKVError
from .tensor_io import DecodeTrace, KvSlab, SegmentSpec, SynthSpec, gen_synthetic, kvt_read, kvt_write

__all__ = [
    "CacheState",
    "DecodeTrace",
    "KvSlab",
    "QuantConfig",
    "SegmentSpec",
    "SynthSpec",
    "VidKVError",
    "attention_reference",
    "decode_step",
    "flush_residual",
    "gen_synthetic",
    "kvt_read",
    "kvt_write",
    "prefill",
]
