import json
import subprocess
import sys

import numpy as np
import pytest

from vidkv.cli import main
from vidkv.tensor_io import gen_trace, kvt_read, write_trace


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def slab(tmp_path, capsys):
    path = tmp_path / "k.kvt"
    code, _, _ = run(capsys, "gen", "--kind", "gaussian_outlier_channels", "--tokens", 70, "--channels", 16,
                     "--outlier-count", 2, "--outlier-magnitude", 8, "--seed", 3, "--out", path)
    assert code == 0
    return path


def test_gen_writes_kvt(slab):
    assert kvt_read(slab).shape == (70, 16)


def test_gen_is_seeded(tmp_path, capsys, slab):
    other = tmp_path / "again.kvt"
    run(capsys, "gen", "--kind", "gaussian_outlier_channels", "--tokens", 70, "--channels", 16,
        "--outlier-count", 2, "--outlier-magnitude", 8, "--seed", 3, "--out", other)
    assert other.read_bytes() == slab.read_bytes()


def test_quantize_and_inspect(tmp_path, capsys, slab):
    snap = tmp_path / "s.kvsnap"
    code, out, _ = run(capsys, "quantize", slab, "--out", snap, "--key-k", 0.25)
    assert code == 0
    report = json.loads(out)
    assert report["key"]["mse"] > 0
    assert len(report["value"]["per_channel_mse"]) == 16
    code, out, _ = run(capsys, "inspect", snap)
    assert code == 0 and '"key_k":0.25' in out and "residual tokens: key=6 value=6" in out


def test_simulate(tmp_path, capsys, slab):
    trace = tmp_path / "t.trace"
    write_trace(gen_trace(130, 16, seed=1), trace)
    code, out, _ = run(capsys, "simulate", slab, trace)
    report = json.loads(out)
    assert code == 0
    assert report["steps"] == 130 and report["flushes"] == 1
    assert report["residual_tokens"] == 8
    assert len(report["per_step_divergence"]) == 130


def test_simulate_identity(tmp_path, capsys, slab):
    trace = tmp_path / "t.trace"
    write_trace(gen_trace(20, 16, seed=1), trace)
    _, out, _ = run(capsys, "simulate", slab, trace, "--identity")
    assert json.loads(out)["attention_divergence"] < 1e-9


def test_sweep(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "config": {"key_k": [0.5, 1.0]}, "seeds": 1, "prefill": 64,
        "workload": {"kind": "gaussian_outlier_channels", "tokens": 80, "channels": 16},
    }))
    code, out, _ = run(capsys, "sweep", grid, "--out", tmp_path / "res")
    assert code == 0
    assert (tmp_path / "res.csv").exists() and (tmp_path / "res.json").exists()


def test_sweep_bad_grid(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"config": {"nope": [1]}}))
    code, _, err = run(capsys, "sweep", grid, "--out", tmp_path / "res")
    assert code == 2
    assert err.startswith("error: config:") and "nope" in err


def test_compare_axes(capsys):
    code, out, _ = run(capsys, "compare-axes", "--kind", "gaussian_outlier_tokens", "--outlier-count", 4,
                       "--outlier-magnitude", 20, "--seeds", 5, "--bits", "ternary")
    assert code == 0
    assert 0.0 <= json.loads(out)["per_channel_win_rate"] <= 1.0


def test_mem_fp16(capsys):
    code, out, _ = run(capsys, "mem", "--fp16", "--preset", "long-video")
    assert code == 0
    assert json.loads(out)["total_bytes"] == 719_323_136_000


def test_mem_quantized(capsys):
    _, out, _ = run(capsys, "mem", "--key-k", 0.5, "--value-mode", "ternary_stp", "--p", 0.2)
    rep = json.loads(out)
    assert rep["key_code_bits_per_element"] == 1.5
    assert rep["value_code_bits_per_element"] == pytest.approx(1.68)


def test_config_error_line(capsys):
    code, _, err = run(capsys, "mem", "--p", 0.2)
    assert code == 2
    assert err.strip().splitlines() == [err.strip()]
    assert err.startswith("error: config:")


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"key_k": 0.75}))
    _, out, _ = run(capsys, "mem", "--config", cfg, "--G", 32)
    assert json.loads(out)["key_code_bits_per_element"] == 1.75


def test_bad_kvt(tmp_path, capsys):
    bad = tmp_path / "bad.kvt"
    bad.write_bytes(b"KVTENS01" + np.array([2, 2], "<u4").tobytes() + b"\0" * 12)
    code, _, err = run(capsys, "quantize", bad, "--out", tmp_path / "s")
    assert code == 2 and err.startswith("error: length:")


def test_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "inspect", tmp_path / "none")
    assert code == 2 and err.startswith("error: io:")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "vidkv", "mem", "--fp16"], capture_output=True, text=True)
    assert res.returncode == 0 and "719323136000" in res.stdout


def test_gen_trace(tmp_path, capsys, slab):
    trace = tmp_path / "t.kvtrace"
    code, _, _ = run(capsys, "gen", "--trace-steps", 12, "--channels", 16, "--seed", 2, "--out", trace)
    assert code == 0
    code, out, _ = run(capsys, "simulate", slab, trace)
    assert code == 0 and json.loads(out)["steps"] == 12
