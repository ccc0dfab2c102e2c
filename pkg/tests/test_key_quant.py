import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_dft, brute_half_spectrum_components, naive_mse
from vidkv.config import QuantConfig
from vidkv.errors import GeometryError
from vidkv.key_quant import (
    ChannelScore,
    FftSignBlock,
    dequantize_key_array,
    dequantize_key_block,
    fft_sign_dequantize,
    fft_sign_quantize,
    partition_channels,
    quantize_key_block,
    score_channels,
    spectrum_components,
)
from vidkv.quant_core import GroupGeometry, PackedBlock, uniform_dequantize_array, uniform_quantize
from vidkv.tensor_io import KvSlab, SynthSpec, gen_synthetic, outlier_indices


def one_bit_uniform(x):
    lo, hi = x.min(), x.max()
    return np.where(x - lo >= (hi - lo) / 2, hi, lo) if hi > lo else x.copy()


# --- scoring ---------------------------------------------------------------


def test_range_score():
    assert score_channels(KvSlab([[1.0], [5.0], [3.0]]), "range").values.tolist() == [4.0]


@pytest.mark.parametrize("metric", ["range", "variance", "outlier_count"])
def test_constant_channel_scores_zero(metric):
    assert score_channels(KvSlab(np.full((6, 1), 2.5)), metric).values.tolist() == [0.0]


def test_outlier_count_hand_value():
    # mean 3.25, threshold 9.75: only 10 exceeds it
    assert score_channels(KvSlab([[1.0], [1.0], [1.0], [10.0]]), "outlier_count", 3.0).values.tolist() == [1.0]


def test_variance_is_population_variance():
    assert score_channels(KvSlab([[0.0], [2.0]]), "variance").values.tolist() == [1.0]


def test_empty_window_rejected():
    with pytest.raises(GeometryError):
        score_channels(KvSlab.empty(3))


# --- partition -------------------------------------------------------------


def scores(values):
    return ChannelScore("range", np.asarray(values, dtype=np.float64))


def test_topk_partition():
    assert partition_channels(scores([5.0, 0.1, 3.0, 0.2]), 0.5).anomalous.tolist() == [0, 2]


def test_partition_boundaries():
    assert partition_channels(scores([1, 2, 3]), 0.0).anomalous.tolist() == []
    assert partition_channels(scores([1, 2, 3]), 1.0).anomalous.tolist() == [0, 1, 2]


def test_partition_tie_break_lower_index():
    assert partition_channels(scores([1, 1, 1, 1]), 0.5).anomalous.tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 100)), st.floats(0, 1))
def test_partition_exhaustive_and_sized(values, k):
    part = partition_channels(scores(values), k)
    both = np.concatenate([part.anomalous, part.normal])
    assert sorted(both.tolist()) == list(range(values.size))
    assert part.anomalous.size == int(np.floor(k * values.size + 0.5))
    assert partition_channels(scores(values), k) == part


# --- half-spectrum sign coding ---------------------------------------------


def test_zero_window():
    bits, s = fft_sign_quantize(np.zeros(8))
    assert bits.tolist() == [1] * 8 and s == 0.0
    assert fft_sign_dequantize(bits, s, 8).tolist() == [0.0] * 8


def test_constant_window_hand_dft():
    c = 2.5
    bits, s = fft_sign_quantize(np.full(4, c))
    # spectrum [4c, 0, 0]: real parts of bins 0..2 and imag of bin 1 -> 4 components
    assert bits.tolist() == [1, 1, 1, 1]
    assert s == pytest.approx(c)


def test_alternating_window_matches_brute_dft():
    x = [1.0, -1.0, 1.0, -1.0]
    X = brute_dft(x)
    assert abs(X[2] - 4) < 1e-12 and all(abs(X[f]) < 1e-12 for f in (0, 1, 3))
    bits, s = fft_sign_quantize(x)
    comps = brute_half_spectrum_components(x)
    assert bits.tolist() == [int(c >= -1e-12) for c in comps]
    assert s == pytest.approx(np.mean(np.abs(comps)))


@pytest.mark.parametrize("G", [4, 7, 8, 32])
def test_component_count_equals_window(G, rng):
    x = rng.normal(size=G)
    comps = spectrum_components(x[None, :])[0]
    assert comps.size == G
    assert np.allclose(comps, brute_half_spectrum_components(x), atol=1e-9)


def test_wrong_length_bits_rejected():
    with pytest.raises(GeometryError):
        fft_sign_dequantize(np.ones(5), 1.0, 8)


def test_sign_coding_beats_plain_one_bit_on_frame_periodic_windows():
    # 64-token frames: every 32-token window is one aperiodic slice of a frame
    spec = SynthSpec("periodic_frames", tokens=256, channels=16, frame_len=64, noise=0.05)
    wins = 0
    for seed in range(20):
        data = gen_synthetic(spec.with_seed(seed)).data.astype(np.float64)
        windows = data.T.reshape(-1, 32)
        fft_err = np.mean([naive_mse(fft_sign_dequantize(*fft_sign_quantize(w), 32), w) for w in windows])
        plain_err = np.mean([naive_mse(one_bit_uniform(w), w) for w in windows])
        wins += fft_err < plain_err
    assert wins == 20


@pytest.mark.xfail(strict=True, reason="sign coding flattens the magnitude spectrum, so a pure tone's "
                   "peak bin is not preserved")
def test_pure_cosine_dominant_bin_preserved():
    G = 32
    x = np.cos(2 * np.pi * 3 * np.arange(G) / G + 0.3)
    rec = fft_sign_dequantize(*fft_sign_quantize(x), G)
    before = np.argmax(np.abs(brute_dft(list(x)))[: G // 2 + 1])
    after = np.argmax(np.abs(brute_dft(list(rec)))[: G // 2 + 1])
    assert before == after


@pytest.mark.xfail(strict=True, reason="for smooth narrow-band windows plain 1-bit min/max coding has "
                   "lower error than spectral sign coding")
def test_pure_cosine_sign_coding_beats_plain():
    G = 32
    x = np.cos(2 * np.pi * 2 * np.arange(G) / G + 0.3)
    rec = fft_sign_dequantize(*fft_sign_quantize(x), G)
    assert naive_mse(rec, x) < naive_mse(one_bit_uniform(x), x)


# --- key blocks --------------------------------------------------------------


def test_k_one_is_plain_two_bit(rng):
    win = KvSlab(rng.normal(size=(64, 6)))
    block = quantize_key_block(win, QuantConfig(key_k=1.0, G=32))
    assert block.normal is None
    assert block.anomalous == uniform_quantize(win, 2, GroupGeometry("per_channel", 32))
    rec = dequantize_key_block(block).data
    s = np.repeat(block.anomalous.scales.reshape(6, 2), 32, axis=1).T
    assert np.all(np.abs(rec - win.data) <= s / 2 + 1e-6)


@pytest.mark.parametrize("k, expected_bits", [(0.5, 1.5), (0.25, 1.25), (0.75, 1.75), (1.0, 2.0)])
def test_average_code_bits(k, expected_bits, rng):
    win = KvSlab(rng.normal(size=(32, 4)))
    block = quantize_key_block(win, QuantConfig(key_k=k, G=32))
    assert block.code_bits / win.data.size == expected_bits
    assert block.partition.anomalous.size == round(4 * k)


def test_fft_gating_follows_k(rng):
    win = KvSlab(rng.normal(size=(32, 4)))
    assert isinstance(quantize_key_block(win, QuantConfig(key_k=0.5, G=32)).normal, FftSignBlock)
    assert isinstance(quantize_key_block(win, QuantConfig(key_k=0.75, G=32)).normal, FftSignBlock)
    assert isinstance(quantize_key_block(win, QuantConfig(key_k=0.25, G=32)).normal, PackedBlock)
    assert isinstance(quantize_key_block(win, QuantConfig(key_k=0.25, G=32, fft_mode="on")).normal, FftSignBlock)
    assert isinstance(quantize_key_block(win, QuantConfig(key_k=0.5, G=32, fft_mode="off")).normal, PackedBlock)


def test_fft_block_bit_budget(rng):
    win = KvSlab(rng.normal(size=(96, 8)))
    block = quantize_key_block(win, QuantConfig(key_k=0.5, G=32))
    n_norm = block.partition.normal.size
    assert len(block.normal.sign_bits) * 8 == 96 * n_norm
    assert block.normal.scales.size == n_norm * 3
    assert np.all(block.normal.scales >= 0)


def test_anomalous_path_isolation(rng):
    data = rng.normal(size=(64, 8))
    data[:, 5] *= 30
    win = KvSlab(data)
    block = quantize_key_block(win, QuantConfig(key_k=0.25, G=32))
    rec = dequantize_key_array(block)
    for c in block.partition.anomalous:
        alone = uniform_dequantize_array(uniform_quantize(KvSlab(data[:, [c]]), 2, GroupGeometry("per_channel", 32)))
        assert np.array_equal(rec[:, c], alone[:, 0])
    assert 5 in block.partition.anomalous


def test_bad_extent_rejected(rng):
    with pytest.raises(GeometryError):
        quantize_key_block(KvSlab(rng.normal(size=(40, 4))), QuantConfig(G=32))


def test_range_beats_outlier_count_metric():
    wins = 0
    for seed in range(40):
        K = gen_synthetic(SynthSpec("gaussian_outlier_channels", 128, 32, 4, 20.0, seed=seed))
        err = {m: naive_mse(dequantize_key_array(quantize_key_block(K, QuantConfig(key_k=0.5, key_metric=m))), K.data)
               for m in ("range", "outlier_count")}
        wins += err["range"] < err["outlier_count"]
    assert wins >= 38


def test_range_scores_scale_shift_covariant(rng):
    data = rng.integers(-50, 50, size=(32, 10)).astype(np.float32)
    base = score_channels(KvSlab(data)).values
    mapped = score_channels(KvSlab(4.0 * data + 7.0)).values
    assert np.array_equal(mapped, 4.0 * base)
    for k in (0.2, 0.5, 0.8):
        assert partition_channels(score_channels(KvSlab(data)), k) == \
            partition_channels(score_channels(KvSlab(4.0 * data + 7.0)), k)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 2**32 - 1))
def test_range_covariance_property(a, b, seed):
    data = np.random.default_rng(seed).normal(size=(16, 6))
    r0 = score_channels(KvSlab(data)).values
    r1 = score_channels(KvSlab(a * data + b)).values
    assert np.allclose(r1, a * r0, rtol=1e-5, atol=1e-5)


def test_injected_channels_land_in_anomalous_set():
    hits = 0
    for seed in range(100):
        spec = SynthSpec("gaussian_outlier_channels", 64, 16, 4, 10.0, seed=seed)
        K = gen_synthetic(spec)
        block = quantize_key_block(K, QuantConfig(key_k=0.25, G=32))
        hits += set(outlier_indices(spec).tolist()) <= set(block.partition.anomalous.tolist())
    assert hits >= 99
