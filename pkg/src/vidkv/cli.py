"""``vidkv`` command line: gen, quantize, simulate, sweep, compare-axes, mem, inspect.

Reports go to stdout as JSON. Failures exit non-zero after printing one line
``error: <kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis
from .cache_engine import prefill, reference_decode, run_decode
from .config import FFT_MODES, KEY_REQUANT, METRICS, VALUE_MODES, QuantConfig
from .errors import VidKVError
from .snapshot import describe, read_snapshot, write_snapshot
from .tensor_io import (
    SYNTH_KINDS,
    SegmentSpec,
    SynthSpec,
    gen_synthetic,
    gen_trace,
    kvt_read,
    kvt_write,
    read_trace,
    write_trace,
)


def _add_config_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", type=Path, help="flat JSON file with QuantConfig fields")
    ap.add_argument("--key-k", type=float)
    ap.add_argument("--key-metric", choices=METRICS)
    ap.add_argument("--key-M", type=float, dest="key_M")
    ap.add_argument("--fft-mode", choices=FFT_MODES)
    ap.add_argument("--value-mode", choices=VALUE_MODES)
    ap.add_argument("--gamma", type=float)
    ap.add_argument("--p", type=float)
    ap.add_argument("--G", type=int, dest="G")
    ap.add_argument("--R", type=int, dest="R")
    ap.add_argument("--key-requant", choices=KEY_REQUANT)
    ap.add_argument("--identity", action="store_true", default=None)
    ap.add_argument("--experimental", action="store_true", default=None)


def _config_from(args) -> QuantConfig:
    raw = QuantConfig.load(args.config).to_dict() if args.config else {}
    for name in QuantConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    return QuantConfig.from_dict(raw)


def _add_segment_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--system-len", type=int, default=0)
    ap.add_argument("--text-len", type=int, default=0)


def _segments(args, tokens: int) -> SegmentSpec:
    return SegmentSpec(args.system_len, tokens - args.system_len - args.text_len, args.text_len)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen(args) -> None:
    if args.trace_steps is not None:
        write_trace(gen_trace(args.trace_steps, args.channels, args.seed), args.out)
        return
    spec = SynthSpec(args.kind, args.tokens, args.channels, args.outlier_count, args.outlier_magnitude,
                     args.frame_len, args.seed, args.noise)
    kvt_write(gen_synthetic(spec), args.out)


def _prefill_from_files(args, config):
    K = kvt_read(args.keys)
    V = kvt_read(args.values) if args.values else K
    seg = _segments(args, K.tokens)
    X_v, X_t = analysis.cross_modal_inputs(K, seg) if config.p > 0 else (None, None)
    return K, V, prefill(K, V, config, seg, X_v, X_t)


def cmd_quantize(args) -> None:
    config = _config_from(args)
    K, V, state = _prefill_from_files(args, config)
    write_snapshot(state, args.out)
    _emit({
        "note": analysis.REPORT_HEADER.lstrip("# "),
        "snapshot": str(args.out),
        "key": analysis.reconstruction_error(K, state.key_matrix()).to_dict(),
        "value": analysis.reconstruction_error(V, state.value_matrix()).to_dict(),
    })


def cmd_simulate(args) -> None:
    config = _config_from(args)
    K, V, state = _prefill_from_files(args, config)
    trace = read_trace(args.trace)
    outs = run_decode(state, trace)
    ref = reference_decode(K, V, trace)
    per_step = (np.linalg.norm(outs - ref, axis=1) / np.maximum(np.linalg.norm(ref, axis=1), 1e-300)).tolist()
    _emit({
        "note": analysis.REPORT_HEADER.lstrip("# "),
        "config": config.to_dict(),
        "steps": trace.steps,
        "attention_divergence": analysis.attention_divergence(outs, ref),
        "per_step_divergence": per_step,
        "flushes": state.flush_count,
        "residual_tokens": state.residual_tokens,
    })


def cmd_sweep(args) -> None:
    csv_path, json_path = analysis.run_sweep(args.grid, args.out)
    _emit({"csv": str(csv_path), "json": str(json_path)})


def cmd_compare_axes(args) -> None:
    spec = SynthSpec(args.kind, args.tokens, args.channels, args.outlier_count, args.outlier_magnitude,
                     args.frame_len, 0, args.noise)
    spec.validate()
    summary = analysis.compare_axes(spec, args.bits, range(args.seeds), args.G)
    if not args.per_seed:
        summary.pop("per_seed")
    _emit(summary)


def cmd_mem(args) -> None:
    shape = analysis.LONG_VIDEO_SHAPE if args.preset == "long-video" else analysis.DeploymentShape(
        args.layers, args.kv_heads, args.head_dim, args.tokens, args.batch)
    config = None if args.fp16 else _config_from(args)
    report = analysis.memory_report(config, shape).to_dict()
    report["shape"] = {f.name: getattr(shape, f.name) for f in fields(shape)}
    _emit(report)


def cmd_inspect(args) -> None:
    print(describe(read_snapshot(args.snapshot)))


def _add_synth_flags(ap: argparse.ArgumentParser, with_seed: bool = True) -> None:
    ap.add_argument("--kind", choices=SYNTH_KINDS, default="gaussian_outlier_channels")
    ap.add_argument("--tokens", type=int, default=128)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--outlier-count", type=int, default=0)
    ap.add_argument("--outlier-magnitude", type=float, default=1.0)
    ap.add_argument("--frame-len", type=int, default=1)
    ap.add_argument("--noise", type=float, default=0.05)
    if with_seed:
        ap.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vidkv", description="Low-bit KV-cache quantization analysis")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic slab as a KVT file (or a decode trace)")
    _add_synth_flags(p)
    p.add_argument("--trace-steps", type=int, help="write a random q/k/v decode trace of this many steps instead")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("quantize", help="prefill a KVT slab, write a snapshot and error report")
    p.add_argument("keys", type=Path)
    p.add_argument("--values", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    _add_segment_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("simulate", help="prefill + decode a trace, report divergence from FP attention")
    p.add_argument("keys", type=Path)
    p.add_argument("trace", type=Path)
    p.add_argument("--values", type=Path)
    _add_config_flags(p)
    _add_segment_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a JSON config grid, write CSV + JSON summary")
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output path stem")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-axes", help="per-channel vs per-token value quantization")
    _add_synth_flags(p, with_seed=False)
    p.add_argument("--bits", choices=("1", "2", "ternary"), default="2")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--G", type=int, default=32, dest="G")
    p.add_argument("--per-seed", action="store_true")
    p.set_defaults(func=cmd_compare_axes)

    p = sub.add_parser("mem", help="byte ledger for a deployment shape")
    p.add_argument("--fp16", action="store_true", help="account the unquantized FP16 cache")
    p.add_argument("--preset", choices=("long-video",))
    p.add_argument("--layers", type=int, default=28)
    p.add_argument("--kv-heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--tokens", type=int, default=196_000)
    p.add_argument("--batch", type=int, default=256)
    _add_config_flags(p)
    p.set_defaults(func=cmd_mem)

    p = sub.add_parser("inspect", help="dump a snapshot")
    p.add_argument("snapshot", type=Path)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except VidKVError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
