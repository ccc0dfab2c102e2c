import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidkv.errors import GeometryError, SpanIndexError
from vidkv.quant_core import GroupGeometry, uniform_dequantize_array, uniform_quantize
from vidkv.tensor_io import KvSlab
from vidkv.value_quant import (
    ProtectedSet,
    TernaryParams,
    dequantize_value_array,
    dequantize_value_block,
    importance_scores,
    quantize_value_block,
    select_protected,
    ternary_dequantize,
    ternary_dequantize_array,
    ternary_quantize,
    ternary_weighted_sum,
    value_weighted_sum,
)

P4 = TernaryParams(0.7, GroupGeometry("per_channel", 4))


def column(values):
    return KvSlab(np.asarray(values, dtype=np.float32).reshape(-1, 1))


def test_all_zero_window():
    block = ternary_quantize(KvSlab(np.zeros((4, 3))), P4)
    assert block.scales.tolist() == [0.0, 0.0, 0.0]
    assert np.all(block.digit_matrix() == 0)
    assert np.all(ternary_dequantize(block).data == 0)


def test_hand_evaluated_group():
    # s = 2.1 / 4 = 0.525, alpha = 0.3675
    block = ternary_quantize(column([0.9, -0.9, 0.0, 0.3]), P4)
    assert block.scales[0] == pytest.approx(0.525)
    assert block.digit_matrix().ravel().tolist() == [1, -1, 0, 0]
    assert ternary_dequantize(block).data.ravel().tolist() == pytest.approx([0.525, -0.525, 0, 0])


def test_tiny_gamma_gives_signs(rng):
    x = rng.normal(size=(8, 2))
    x[x == 0] = 1.0
    block = ternary_quantize(KvSlab(x), TernaryParams(1e-9, GroupGeometry("per_channel", 4)))
    assert np.array_equal(block.digit_matrix(), np.sign(x).astype(np.int8))


def test_error_bound_against_brute_scan(rng):
    for _ in range(20):
        x = rng.normal(size=(32, 4)).astype(np.float32)
        block = ternary_quantize(KvSlab(x), TernaryParams(0.7, GroupGeometry("per_channel", 32)))
        rec = ternary_dequantize_array(block)
        for c in range(4):
            s = float(block.scales[c])
            alpha = 0.7 * s
            for t in range(32):
                v = float(x[t, c])
                assert abs(v - rec[t, c]) <= max(alpha, abs(v) - s) + 1e-6


def test_payload_size_is_ceil_fifth(rng):
    block = ternary_quantize(KvSlab(rng.normal(size=(32, 3))), TernaryParams())
    assert len(block.digits) == -(-96 // 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["per_channel", "per_token"]))
def test_odd_symmetry(seed, axis):
    x = np.random.default_rng(seed).normal(size=(8, 8))
    params = TernaryParams(0.7, GroupGeometry(axis, 4))
    pos = ternary_quantize(KvSlab(x), params)
    neg = ternary_quantize(KvSlab(-x), params)
    assert np.array_equal(neg.digit_matrix(), -pos.digit_matrix())
    assert np.array_equal(neg.scales, pos.scales)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_scale_covariance(seed, c):
    # powers of two keep the float32 arithmetic exact
    x = np.random.default_rng(seed).normal(size=(8, 4))
    a = ternary_quantize(KvSlab(x), P4)
    b = ternary_quantize(KvSlab(c * x), P4)
    assert np.array_equal(a.digit_matrix(), b.digit_matrix())
    assert np.array_equal(b.scales, (c * a.scales).astype(np.float32))


def test_importance_dot_products():
    assert importance_scores(KvSlab([[1, 0], [0, 1]]), KvSlab([[1, 0]])).tolist() == [1.0, 0.0]


def test_importance_zero_text():
    assert importance_scores(KvSlab(np.ones((3, 2))), KvSlab(np.zeros((2, 2)))).tolist() == [0, 0, 0]


def test_importance_linear_in_text(rng):
    xv, xt = KvSlab(rng.normal(size=(10, 4))), rng.normal(size=(3, 4))
    base = importance_scores(xv, KvSlab(xt))
    scaled = importance_scores(xv, KvSlab(2.0 * xt))
    assert np.allclose(scaled, 2.0 * base)
    assert np.array_equal(np.argsort(base, kind="stable"), np.argsort(scaled, kind="stable"))


def test_importance_channel_mismatch():
    with pytest.raises(GeometryError):
        importance_scores(KvSlab(np.ones((2, 3))), KvSlab(np.ones((2, 4))))


def test_select_top_tokens():
    assert select_protected([0.9, 0.1, 0.5, 0.7], 0.5, 0, 4).indices.tolist() == [0, 3]
    assert select_protected([0.9, 0.1, 0.5, 0.7], 0.5, 10, 4).indices.tolist() == [10, 13]


def test_select_boundaries():
    assert select_protected([1, 2, 3], 0.0, 0, 3).indices.tolist() == []
    assert select_protected([1, 2, 3], 1.0, 2, 3).indices.tolist() == [2, 3, 4]


def test_select_tie_break():
    assert select_protected(np.ones(8), 0.25, 0, 8).indices.tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False).map(lambda x: round(x, 3)), min_size=1, max_size=40, unique=True),
       st.floats(0, 1))
def test_select_invariant_under_monotone_transform(scores, p):
    s = np.asarray(scores)
    a = select_protected(s, p, 3, s.size)
    b = select_protected(np.arctan(s) * 4.0, p, 3, s.size)
    assert a == b


def test_empty_protection_is_plain_ternary(rng):
    win = KvSlab(rng.normal(size=(64, 4)))
    block = quantize_value_block(win, TernaryParams(), ProtectedSet.empty())
    assert block.main == ternary_quantize(win, TernaryParams())
    assert np.array_equal(dequantize_value_array(block), ternary_dequantize_array(block.main))


def test_full_protection_is_two_bit(rng):
    win = KvSlab(rng.normal(size=(64, 4)))
    block = quantize_value_block(win, TernaryParams(), ProtectedSet(np.arange(64), 1.0))
    assert block.main is None
    assert block.protected == uniform_quantize(win, 2, GroupGeometry("per_channel", 32))


def test_average_bits_at_p_point_two(rng):
    win = KvSlab(rng.normal(size=(160, 5)))
    block = quantize_value_block(win, TernaryParams(), select_protected(rng.normal(size=160), 0.2, 0, 160))
    bits = block.code_bits / win.data.size
    assert 1.66 <= bits <= 1.68


def test_protected_rows_keep_their_position(rng):
    data = rng.normal(size=(64, 4))
    data[[5, 40]] *= 50
    win = KvSlab(data)
    block = quantize_value_block(win, TernaryParams(), ProtectedSet(np.array([5, 40]), 0.0))
    rec = dequantize_value_block(block).data
    both = uniform_dequantize_array(uniform_quantize(KvSlab(data[[5, 40]]), 2, GroupGeometry("per_channel", 32),
                                                     allow_partial=True))
    assert np.allclose(rec[[5, 40]], both)


def test_protected_index_outside_span(rng):
    with pytest.raises(SpanIndexError):
        quantize_value_block(KvSlab(rng.normal(size=(32, 2))), TernaryParams(), ProtectedSet(np.array([40]), 0.1))


def test_offset_protected_indices(rng):
    win = KvSlab(rng.normal(size=(32, 2)))
    block = quantize_value_block(win, TernaryParams(), ProtectedSet(np.array([105]), 0.1), offset=100)
    assert block.protected_rows.tolist() == [5]


def test_protected_error_not_worse_than_ternary(rng):
    for _ in range(100):
        data = rng.normal(size=(64, 8))
        rows = np.sort(rng.choice(64, size=13, replace=False))
        win = KvSlab(data)
        stp = dequantize_value_array(quantize_value_block(win, TernaryParams(), ProtectedSet(rows, 0.2)))
        tern = ternary_dequantize_array(ternary_quantize(win, TernaryParams()))
        x = win.data.astype(np.float64)
        assert np.sum((stp[rows] - x[rows]) ** 2) <= np.sum((tern[rows] - x[rows]) ** 2)


@pytest.mark.parametrize("axis", ["per_channel", "per_token"])
def test_add_sub_accumulation_matches_matmul(axis, rng):
    data = rng.normal(size=(70, 64))
    block = ternary_quantize(KvSlab(data), TernaryParams(0.7, GroupGeometry(axis, 32)), allow_partial=True)
    w = rng.dirichlet(np.ones(70))
    assert np.allclose(ternary_weighted_sum(block, w), w @ ternary_dequantize_array(block), rtol=1e-10, atol=1e-12)


def test_value_weighted_sum_paths_agree(rng):
    win = KvSlab(rng.normal(size=(64, 8)))
    block = quantize_value_block(win, TernaryParams(), ProtectedSet(np.array([1, 9, 33]), 0.1))
    w = rng.dirichlet(np.ones(64))
    assert np.allclose(value_weighted_sum(block, w, fast=True), value_weighted_sum(block, w, fast=False))
