"""Error and memory accounting, the standard synthetic suites, sweeps and axis comparisons.

Quality is measured only through reconstruction MSE and attention divergence
against the full-precision reference; no model or judge is involved.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np

from .cache_engine import CacheState, prefill, reference_decode, run_decode
from .config import QuantConfig
from .errors import ConfigError, GeometryError
from .key_quant import QuantizedKeyBlock, anomalous_count
from .quant_core import GroupGeometry, uniform_dequantize_array, uniform_quantize_array
from .tensor_io import DecodeTrace, KvSlab, SegmentSpec, SynthSpec, gen_synthetic, make_rng
from .value_quant import (
    QuantizedValueBlock,
    TernaryParams,
    ternary_dequantize_array,
    ternary_quantize_array,
)

REPORT_HEADER = (
    "# quality is reconstruction MSE / attention divergence vs full precision; "
    "no model or GPT-judged benchmark is run"
)


# ---------------------------------------------------------------------------
# Error reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    mse: float
    max_abs: float
    per_channel_mse: list
    per_token_mse: list
    attention_divergence: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruction_error(original, reconstructed, attention_divergence: float | None = None) -> ErrorReport:
    a = np.asarray(original.data if isinstance(original, KvSlab) else original, dtype=np.float64)
    b = np.asarray(reconstructed.data if isinstance(reconstructed, KvSlab) else reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return ErrorReport(0.0, 0.0, [0.0] * a.shape[1], [], attention_divergence)
    sq = (a - b) ** 2
    return ErrorReport(
        mse=float(sq.mean()),
        max_abs=float(np.sqrt(sq.max())),
        per_channel_mse=sq.mean(axis=0).tolist(),
        per_token_mse=sq.mean(axis=1).tolist(),
        attention_divergence=attention_divergence,
    )


def attention_divergence(outputs: np.ndarray, reference: np.ndarray) -> float:
    """Mean over steps of ||out - ref|| / ||ref||."""
    outputs = np.asarray(outputs, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if outputs.shape != reference.shape:
        raise GeometryError("output and reference traces differ in shape")
    if outputs.shape[0] == 0:
        return 0.0
    num = np.linalg.norm(outputs - reference, axis=1)
    den = np.maximum(np.linalg.norm(reference, axis=1), np.finfo(np.float64).tiny)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Bit / memory ledger
# ---------------------------------------------------------------------------

TERNARY_PACKED_BITS = Fraction(8, 5)
TERNARY_THEORETICAL_BITS = math.log2(3)


def key_code_bits(k: float, head_dim: int = 128) -> Fraction:
    n_a = anomalous_count(k, head_dim)
    return Fraction(2 * n_a + (head_dim - n_a), head_dim)


def value_code_bits(config: QuantConfig) -> tuple[Fraction, float]:
    """(packed code bits per element, theoretical bits per element) for values."""
    mode = config.value_mode
    if mode in ("uniform2", "uniform2_per_token"):
        return Fraction(2), 2.0
    if mode == "uniform1":
        return Fraction(1), 1.0
    p = Fraction(str(config.p)) if mode == "ternary_stp" else Fraction(0)
    packed = p * 2 + (1 - p) * TERNARY_PACKED_BITS
    return packed, float(p) * 2 + (1 - float(p)) * TERNARY_THEORETICAL_BITS


@dataclass(frozen=True)
class DeploymentShape:
    layers: int
    kv_heads: int
    head_dim: int
    tokens: int
    batch: int

    @property
    def slices(self) -> int:
        return self.layers * self.kv_heads * self.batch

    @property
    def elements(self) -> int:
        """Elements in the key cache (the value cache has the same count)."""
        return self.slices * self.head_dim * self.tokens


# 28 layers, 128-dim KV, 1000 frames x 196 tokens, batch 256
LONG_VIDEO_SHAPE = DeploymentShape(layers=28, kv_heads=1, head_dim=128, tokens=196 * 1000, batch=256)


@dataclass(frozen=True)
class MemoryReport:
    code_bits_per_element: float
    key_code_bits_per_element: float
    value_code_bits_per_element: float
    value_theoretical_bits_per_element: float
    metadata_bits_per_element: float
    code_bytes: int
    key_code_bytes: int
    value_code_bytes: int
    metadata_bytes: int
    residual_bytes: int
    total_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def _slice_bits(config: QuantConfig, shape: DeploymentShape):
    """Exact integer bit counts (key code, value code, metadata, residual) for one head slice."""
    G, D, T = config.G, shape.head_dim, shape.tokens
    T_q, T_r = T - T % G, T % G
    groups_t = -(-T_q // G)
    n_a = anomalous_count(config.key_k, D)

    key_code = T_q * (2 * n_a + (D - n_a))
    key_meta = groups_t * n_a * 64 + D  # 2-bit groups carry scale+zero; plus the channel mask
    if config.fft_enabled:
        key_meta += groups_t * (D - n_a) * 32
    else:
        key_meta += groups_t * (D - n_a) * 64

    mode = config.value_mode
    if mode == "ternary_stp":
        n_p = int(np.floor(config.p * T_q + 0.5))
    else:
        n_p = 0
    T_u = T_q - n_p
    if mode in ("ternary", "ternary_stp"):
        value_code = 8 * -(-(T_u * D) // 5)
        value_meta = -(-T_u // G) * D * 32
    elif mode == "uniform2_per_token":
        value_code = 2 * T_u * D
        value_meta = T_u * -(-D // G) * 64
    else:
        value_code = (1 if mode == "uniform1" else 2) * T_u * D
        value_meta = -(-T_u // G) * D * 64
    value_code += 2 * n_p * D
    value_meta += -(-n_p // G) * D * 64 + 32 * n_p
    residual = 2 * T_r * D * 16
    return key_code, value_code, key_meta + value_meta, residual


def memory_report(config: QuantConfig | None, shape: DeploymentShape) -> MemoryReport:
    """Byte ledger for K and V caches of ``shape``; ``None`` or identity means FP16."""
    E = shape.elements
    if config is None or config.identity:
        fp = E * 16 // 8
        return MemoryReport(16.0, 16.0, 16.0, 16.0, 0.0, 2 * fp, fp, fp, 0, 0, 2 * fp)
    key_code, value_code, meta, residual = (b * shape.slices for b in _slice_bits(config, shape))
    packed, theoretical = value_code_bits(config)
    kbits = key_code_bits(config.key_k, shape.head_dim)
    key_bytes, value_bytes = -(-key_code // 8), -(-value_code // 8)
    meta_bytes, res_bytes = -(-meta // 8), residual // 8
    return MemoryReport(
        code_bits_per_element=float((kbits + packed) / 2),
        key_code_bits_per_element=float(kbits),
        value_code_bits_per_element=float(packed),
        value_theoretical_bits_per_element=theoretical,
        metadata_bits_per_element=meta / (2 * E),
        code_bytes=key_bytes + value_bytes,
        key_code_bytes=key_bytes,
        value_code_bytes=value_bytes,
        metadata_bytes=meta_bytes,
        residual_bytes=res_bytes,
        total_bytes=key_bytes + value_bytes + meta_bytes + res_bytes,
    )


# ---------------------------------------------------------------------------
# Standard suites
# ---------------------------------------------------------------------------

SUITES = {
    "outlier_channels": SynthSpec("gaussian_outlier_channels", tokens=128, channels=32,
                                  outlier_count=4, outlier_magnitude=20.0),
    "outlier_tokens": SynthSpec("gaussian_outlier_tokens", tokens=128, channels=32,
                                outlier_count=4, outlier_magnitude=20.0),
    "periodic": SynthSpec("periodic_frames", tokens=256, channels=32, frame_len=64, noise=0.05),
    "iid": SynthSpec("gaussian_outlier_channels", tokens=128, channels=32),
}


@dataclass(frozen=True)
class Workload:
    """A decode scenario: keys/values drawn as one sequence, split into prefill and trace."""

    key: SynthSpec
    value: SynthSpec
    prefill: int
    q_scale: float = 0.5
    system_len: int = 0
    text_len: int = 0

    def __post_init__(self) -> None:
        if self.key.tokens != self.value.tokens or self.key.channels != self.value.channels:
            raise ConfigError("key and value workloads must share tokens and channels")
        if not 0 < self.prefill <= self.key.tokens:
            raise ConfigError("prefill must be within (0, tokens]")
        if self.system_len + self.text_len > self.prefill:
            raise ConfigError("system_len + text_len exceed the prefill")

    @property
    def segments(self) -> SegmentSpec:
        return SegmentSpec(self.system_len, self.prefill - self.system_len - self.text_len, self.text_len)

    def materialize(self, seed: int) -> tuple[KvSlab, KvSlab, DecodeTrace]:
        K = gen_synthetic(self.key.with_seed(3 * seed))
        V = gen_synthetic(self.value.with_seed(3 * seed + 1))
        steps = self.key.tokens - self.prefill
        q = self.q_scale * make_rng(3 * seed + 2).standard_normal((steps, self.key.channels))
        trace = DecodeTrace(q, K.data[self.prefill:], V.data[self.prefill:])
        return K.rows(0, self.prefill), V.rows(0, self.prefill), trace


STANDARD_WORKLOAD = Workload(
    key=SynthSpec("gaussian_outlier_channels", tokens=320, channels=32, outlier_count=4, outlier_magnitude=10.0),
    value=SynthSpec("periodic_frames", tokens=320, channels=32, frame_len=64, noise=0.1),
    prefill=256,
    # logit std ~1.4; much sharper attention makes the decode divergence chaotic
    q_scale=0.2,
    system_len=16,
    text_len=16,
)


def cross_modal_inputs(K: KvSlab, segments: SegmentSpec) -> tuple[KvSlab, KvSlab]:
    """Stand-in features for STP: the prefill key rows of the vision and text segments."""
    return KvSlab(K.data[segments.vision_slice]), KvSlab(K.data[segments.text_slice])


@dataclass(frozen=True)
class RunResult:
    state: CacheState
    key_report: ErrorReport
    value_report: ErrorReport
    divergence: float


def run_workload(config: QuantConfig, workload: Workload, seed: int) -> RunResult:
    K, V, trace = workload.materialize(seed)
    seg = workload.segments
    X_v, X_t = cross_modal_inputs(K, seg) if config.p > 0 else (None, None)
    state = prefill(K, V, config, seg, X_v, X_t)
    key_rep = reconstruction_error(K, state.key_matrix())
    value_rep = reconstruction_error(V, state.value_matrix())
    outs = run_decode(state, trace)
    div = attention_divergence(outs, reference_decode(K, V, trace))
    return RunResult(state, key_rep, value_rep, div)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "config", "seed", "key_k", "key_metric", "fft", "value_mode", "p", "key_requant",
    "key_code_bits", "value_code_bits", "value_theoretical_bits", "key_code_bits_measured",
    "value_code_bits_measured", "metadata_bits", "key_mse", "key_max_abs", "value_mse",
    "value_max_abs", "attention_divergence", "flushes",
)
GRID_KEYS = {"config", "workload", "value_workload", "seeds", "prefill", "q_scale", "system_len", "text_len",
             "deployment"}


def _measured_bits(state: CacheState) -> tuple[float, float]:
    kb = [b for b in state.key_blocks if isinstance(b, QuantizedKeyBlock)]
    vb = [b for b in state.value_blocks if isinstance(b, QuantizedValueBlock)]
    k_el = sum(b.tokens * b.channels for b in kb)
    v_el = sum(b.tokens * b.channels for b in vb)
    kbits = sum(b.code_bits for b in kb) / k_el if k_el else 0.0
    vbits = sum(b.code_bits for b in vb) / v_el if v_el else 0.0
    return kbits, vbits


def _synth_from_dict(raw: dict, where: str) -> SynthSpec:
    allowed = {f.name for f in fields(SynthSpec)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        spec = SynthSpec(**raw)
        spec.validate()
    except Exception as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None
    return spec


def expand_grid(raw: dict) -> tuple[list[QuantConfig], Workload, list[int], DeploymentShape]:
    unknown = sorted(set(raw) - GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(unknown)}")
    cfg_raw = raw.get("config", {})
    unknown = sorted(set(cfg_raw) - set(QuantConfig.field_names()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    axes = {k: (v if isinstance(v, list) else [v]) for k, v in cfg_raw.items()}
    names = sorted(axes)
    configs = []
    bad = []
    for combo in product(*(axes[n] for n in names)):
        try:
            configs.append(QuantConfig.from_dict(dict(zip(names, combo))))
        except ConfigError as exc:
            bad.append(f"{dict(zip(names, combo))}: {exc}")
    if bad:
        raise ConfigError("invalid grid entries: " + "; ".join(bad))
    std = STANDARD_WORKLOAD
    if "workload" in raw:
        key = _synth_from_dict(raw["workload"], "workload")
        value = _synth_from_dict(raw.get("value_workload", asdict(key)), "value_workload")
        base = Workload(key, value, key.tokens, std.q_scale)
    else:
        value = _synth_from_dict(raw.get("value_workload", asdict(std.value)), "value_workload")
        base = Workload(std.key, value, std.prefill, std.q_scale, std.system_len, std.text_len)
    workload = Workload(base.key, base.value, int(raw.get("prefill", base.prefill)),
                        float(raw.get("q_scale", base.q_scale)), int(raw.get("system_len", base.system_len)),
                        int(raw.get("text_len", base.text_len)))
    seeds = raw.get("seeds", [0])
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    dep = raw.get("deployment")
    shape = DeploymentShape(**dep) if dep else LONG_VIDEO_SHAPE
    return configs, workload, seeds, shape


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, bool):
        return str(int(x))
    return str(x)


def sweep_rows(configs, workload: Workload, seeds, shape: DeploymentShape = LONG_VIDEO_SHAPE) -> list[dict]:
    rows = []
    for cfg in configs:
        mem = memory_report(cfg, shape)
        for seed in seeds:
            res = run_workload(cfg, workload, seed)
            km, vm = _measured_bits(res.state)
            rows.append({
                "config": cfg.label(), "seed": seed, "key_k": cfg.key_k, "key_metric": cfg.key_metric,
                "fft": cfg.fft_enabled, "value_mode": cfg.value_mode, "p": cfg.p,
                "key_requant": cfg.key_requant,
                "key_code_bits": mem.key_code_bits_per_element,
                "value_code_bits": mem.value_code_bits_per_element,
                "value_theoretical_bits": mem.value_theoretical_bits_per_element,
                "key_code_bits_measured": km, "value_code_bits_measured": vm,
                "metadata_bits": mem.metadata_bits_per_element,
                "key_mse": res.key_report.mse, "key_max_abs": res.key_report.max_abs,
                "value_mse": res.value_report.mse, "value_max_abs": res.value_report.max_abs,
                "attention_divergence": res.divergence, "flushes": res.state.flush_count,
            })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    out.write(REPORT_HEADER + "\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return out.getvalue()


def summarize(rows: list[dict]) -> dict:
    by_cfg: dict[str, list[dict]] = {}
    for r in rows:
        by_cfg.setdefault(r["config"], []).append(r)
    summary = {}
    for label, rs in by_cfg.items():
        summary[label] = {
            "seeds": len(rs),
            "key_code_bits": rs[0]["key_code_bits"],
            "value_code_bits": rs[0]["value_code_bits"],
            "mean_key_mse": float(np.mean([r["key_mse"] for r in rs])),
            "mean_value_mse": float(np.mean([r["value_mse"] for r in rs])),
            "mean_attention_divergence": float(np.mean([r["attention_divergence"] for r in rs])),
        }
    return {"note": REPORT_HEADER.lstrip("# "), "configs": summary}


def run_sweep(grid: dict | str | Path, output: str | Path) -> tuple[Path, Path]:
    """Write ``<output>.csv`` (one row per config x seed) and ``<output>.json`` (summary)."""
    if not isinstance(grid, dict):
        try:
            grid = json.loads(Path(grid).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid file is not valid JSON: {exc}") from None
    configs, workload, seeds, shape = expand_grid(grid)
    rows = sweep_rows(configs, workload, seeds, shape)
    base = Path(output)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    csv_path.write_text(rows_to_csv(rows))
    json_path.write_text(json.dumps(summarize(rows), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# Quantization-axis comparison for value caches
# ---------------------------------------------------------------------------


def value_axis_mse(V: KvSlab, bits: str, axis: str, G: int = 32, gamma: float = 0.7) -> float:
    geometry = GroupGeometry(axis, G)
    data = V.data
    if bits == "ternary":
        rec = ternary_dequantize_array(ternary_quantize_array(data, TernaryParams(gamma, geometry)))
    else:
        rec = uniform_dequantize_array(uniform_quantize_array(data, int(bits), geometry))
    return float(np.mean((rec - data.astype(np.float64)) ** 2))


def compare_axes(spec: SynthSpec, bits: str = "2", seeds=range(100), G: int = 32) -> dict:
    """Paired per_channel vs per_token value-quantization MSE per seed, plus the win-rate."""
    if bits not in ("1", "2", "ternary"):
        raise ConfigError(f"bits must be 1, 2 or ternary, got {bits!r}")
    per_seed = []
    for seed in seeds:
        V = gen_synthetic(spec.with_seed(seed))
        pc = value_axis_mse(V, bits, "per_channel", G)
        pt = value_axis_mse(V, bits, "per_token", G)
        per_seed.append({"seed": seed, "per_channel_mse": pc, "per_token_mse": pt})
    wins = sum(r["per_channel_mse"] < r["per_token_mse"] for r in per_seed)
    return {
        "workload": asdict(spec),
        "bits": bits,
        "per_channel_win_rate": wins / len(per_seed) if per_seed else 0.0,
        "mean_per_channel_mse": float(np.mean([r["per_channel_mse"] for r in per_seed])),
        "mean_per_token_mse": float(np.mean([r["per_token_mse"] for r in per_seed])),
        "per_seed": per_seed,
    }
