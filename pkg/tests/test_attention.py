import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsparse.attention import (
    SparsityConfig,
    approx_scores,
    argtopk,
    ds_decode,
    exact_scores,
    full_attention,
    truncated_attention_oracle,
)
from dsparse.channels import ChannelSet, full_channel_set
from dsparse.exceptions import ChannelOutOfRange, IndexOutOfRange, KTooLarge, ShapeMismatch
from dsparse.label_cache import build_label_cache
from dsparse.tensor import make_rng, randn

from reference import double_sparsity, round_half_up, softmax_attend, topk_by_sort


def instance(seed, S, d_h):
    rng = make_rng(seed)
    return randn(rng, (d_h,)), randn(rng, (S, d_h)), randn(rng, (S, d_h))


def rel_l2(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


# -- full attention ----------------------------------------------------------


def test_zero_query_gives_column_mean():
    y = full_attention(np.zeros(2), np.array([[1.0, -3.0], [2.0, 5.0]]), np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_allclose(y, [2.0, 3.0], atol=1e-6)


def test_single_token_gets_all_weight():
    y = full_attention(np.array([0.3, -1, 2, 9]), np.ones((1, 4)), np.array([[5.0, 6, 7, 8]]))
    np.testing.assert_array_equal(y, [5, 6, 7, 8])


def test_two_token_softmax_by_hand():
    y, w = full_attention([1.0, 0.0], [[10.0, 0.0], [0.0, 10.0]], [[1.0, 0.0], [0.0, 1.0]], return_weights=True)
    a = 10 / math.sqrt(2)
    w0 = math.exp(a) / (math.exp(a) + 1.0)
    np.testing.assert_allclose(w, [w0, 1 - w0], rtol=1e-6)
    np.testing.assert_allclose(y, [w0, 1 - w0], rtol=1e-6)


def test_full_attention_shape_errors():
    with pytest.raises(ShapeMismatch):
        full_attention(np.ones(3), np.ones((2, 4)), np.ones((2, 4)))
    with pytest.raises(ShapeMismatch):
        full_attention(np.ones(4), np.ones((2, 4)), np.ones((3, 4)))


def test_full_attention_matches_reference():
    q, K, V = instance(21, 17, 8)
    ref, _ = softmax_attend(q, K, V)
    np.testing.assert_allclose(full_attention(q, K, V), ref, rtol=1e-5, atol=1e-6)


# -- approximate scores ------------------------------------------------------


def test_full_channels_unquantized_recover_exact_scores():
    q, K, _ = instance(1, 40, 16)
    label = build_label_cache(K, full_channel_set(16), quantized=False)
    s_hat = approx_scores(q, full_channel_set(16), label)
    np.testing.assert_allclose(s_hat, K.astype(np.float64) @ q, atol=1e-6)


def test_zero_query_gives_zero_scores():
    _, K, _ = instance(2, 10, 8)
    cs = ChannelSet([0, 3])
    label = build_label_cache(K, cs)
    assert np.all(approx_scores(np.zeros(8), cs, label) == 0)


def test_restricted_dot_product_by_hand():
    K = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 2.0, -3.0], [0.0, 0.0, 0.0, 0.0]])
    q = np.array([9.0, 2.0, -7.0, 0.5])
    cs = ChannelSet([1, 3])
    label = build_label_cache(K, cs, quantized=False)
    expected = [2 * 2 + 0.5 * 4, 2 * 0.5 + 0.5 * -3, 0.0]
    np.testing.assert_allclose(approx_scores(q, cs, label), expected, atol=1e-6)


def test_channel_out_of_range():
    cs = ChannelSet([1, 5])
    label = build_label_cache(np.ones((3, 8)), cs)
    with pytest.raises(ChannelOutOfRange):
        approx_scores(np.ones(4), cs, label)


# -- argtopk -----------------------------------------------------------------


def test_argtopk_tie_break():
    assert argtopk(np.array([0.5, 0.9, 0.5, 0.1]), 2).tolist() == [0, 1]


def test_argtopk_all():
    assert argtopk(np.array([3.0, 1.0, 2.0]), 3).tolist() == [0, 1, 2]


def test_argtopk_vs_sort_single_case():
    scores = make_rng(37).standard_normal(1000)
    assert argtopk(scores, 37).tolist() == topk_by_sort(scores, 37)


def test_argtopk_too_large():
    with pytest.raises(KTooLarge):
        argtopk(np.zeros(4), 5)


def test_argtopk_sort_oracle_10k_inputs_with_duplicates():
    rng = make_rng(99)
    for _ in range(10_000):
        S = int(rng.integers(1, 24))
        # few distinct values forces many ties
        scores = rng.integers(-3, 4, size=S).astype(np.float32)
        k = int(rng.integers(1, S + 1))
        assert argtopk(scores, k).tolist() == topk_by_sort(scores, k)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=64), st.data())
def test_argtopk_property(values, data):
    k = data.draw(st.integers(1, len(values)))
    got = argtopk(np.array(values, dtype=np.float32), k)
    assert got.tolist() == topk_by_sort(np.array(values, dtype=np.float32), k)
    assert np.all(np.diff(got) > 0)


# -- sparsity config ---------------------------------------------------------


def test_round_half_up_derivations():
    assert SparsityConfig(0.5, 0.5).r(3) == 2
    assert SparsityConfig(1 / 16, 1.0).r(64) == 4
    assert SparsityConfig(1 / 32, 1.0).r(16) == 1  # 0.5 rounds up
    assert SparsityConfig(1 / 64, 1.0).r(16) == 1  # floored at 1
    assert SparsityConfig(1.0, 0.25).k(10) == 3  # 2.5 rounds up
    with pytest.raises(ValueError):
        SparsityConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        SparsityConfig(1.0, 1.5)


@given(st.floats(1e-6, 1.0), st.integers(1, 4096))
def test_sparsity_bounds(frac, n):
    cfg = SparsityConfig(frac, frac)
    assert 1 <= cfg.r(n) <= n and 1 <= cfg.k(n) <= n
    assert cfg.k(n) == min(n, max(1, round_half_up(frac * n)))


# -- Double Sparsity decode --------------------------------------------------


def test_beta_one_matches_full_attention_any_channels():
    q, K, V = instance(4, 64, 16)
    cs = ChannelSet([2, 9, 11])
    y, sel = ds_decode(q, K, V, cs, build_label_cache(K, cs), SparsityConfig(3 / 16, 1.0))
    assert sel.indices.tolist() == list(range(64))
    assert rel_l2(y, full_attention(q, K, V)) <= 1e-5


def test_alpha_one_unquantized_selects_exact_topk():
    q, K, V = instance(5, 128, 32)
    cs = full_channel_set(32)
    cfg = SparsityConfig(1.0, 1 / 8)
    _, sel = ds_decode(q, K, V, cs, build_label_cache(K, cs, quantized=False), cfg)
    assert sel.indices.tolist() == argtopk(exact_scores(q, K), cfg.k(128)).tolist()


def test_seed3_matches_two_stage_reference():
    S, d_h = 64, 16
    q, K, V = instance(3, S, d_h)
    cfg = SparsityConfig(1 / 4, 1 / 4)
    cs = ChannelSet([0, 5, 6, 13])
    y, sel = ds_decode(q, K, V, cs, build_label_cache(K, cs), cfg)
    y_ref, idx_ref, scores_ref = double_sparsity(q, K, V, cs.indices.tolist(), True, cfg.k(S))
    assert cfg.r(d_h) == 4 and cfg.k(S) == 16
    assert sel.indices.tolist() == idx_ref
    np.testing.assert_allclose(sel.approx_scores, scores_ref, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(y, y_ref, rtol=1e-5, atol=1e-6)
    # error vs oracle is bounded by the dropped softmax mass times the V range
    y_full = full_attention(q, K, V)
    _, w = full_attention(q, K, V, return_weights=True)
    dropped = 1.0 - w[sel.indices].sum()
    spread = np.abs(V).max() * 2
    assert np.max(np.abs(y - y_full)) <= 2 * dropped * spread + 1e-6


def test_forced_indices_match_truncated_oracle():
    q, K, V = instance(5, 50, 8)
    idx = np.sort(make_rng(5, 1).choice(50, size=12, replace=False))
    cs = ChannelSet([1, 2])
    y, sel = ds_decode(q, K, V, cs, build_label_cache(K, cs), SparsityConfig(0.25, 0.5), force_indices=idx)
    assert sel.indices.tolist() == idx.tolist()
    np.testing.assert_array_equal(y, truncated_attention_oracle(q, K, V, idx))


def test_truncated_oracle_examples():
    q, K, V = instance(6, 20, 4)
    np.testing.assert_allclose(truncated_attention_oracle(q, K, V, range(20)), full_attention(q, K, V), rtol=1e-6)
    np.testing.assert_array_equal(truncated_attention_oracle(q, K, V, [7]), V[7])
    for bad in ([], [20], [-1], [3, 3]):
        with pytest.raises(IndexOutOfRange):
            truncated_attention_oracle(q, K, V, bad)


def test_label_must_match_kv_length():
    q, K, V = instance(8, 10, 4)
    cs = ChannelSet([0])
    with pytest.raises(ShapeMismatch):
        ds_decode(q, K, V, cs, build_label_cache(K[:9], cs), SparsityConfig())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 80), st.sampled_from([2, 4, 8, 16]), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_weights_normalized_and_output_in_hull(seed, S, d_h, alpha, beta):
    q, K, V = instance(seed, S, d_h)
    q = q * 3
    cfg = SparsityConfig(alpha, beta)
    r = cfg.r(d_h)
    cs = ChannelSet(np.sort(make_rng(seed, 2).choice(d_h, size=r, replace=False)))
    y, sel = ds_decode(q, K, V, cs, build_label_cache(K, cs), cfg)
    idx = sel.indices
    assert idx.size == cfg.k(S) and np.all(np.diff(idx) > 0)
    _, w = full_attention(q, K[idx], V[idx], return_weights=True)
    assert abs(float(w.sum()) - 1.0) <= 1e-6
    _, w_full = full_attention(q, K, V, return_weights=True)
    assert abs(float(w_full.sum()) - 1.0) <= 1e-6
    lo, hi = V[idx].min(axis=0), V[idx].max(axis=0)
    slack = 1e-5 * (1 + np.abs(V).max())
    assert np.all(y >= lo - slack) and np.all(y <= hi + slack)


def test_error_trend_non_increasing_in_k():
    S, d_h = 64, 16
    ks = [1, 2, 4, 8, 16, 32, 64]
    cs = full_channel_set(d_h)
    errs = np.zeros(len(ks))
    for seed in range(200):
        q, K, V = instance(seed, S, d_h)
        q = q * 2
        label = build_label_cache(K, cs, quantized=False)
        y_full = full_attention(q, K, V).astype(np.float64)
        for i, k in enumerate(ks):
            y, _ = ds_decode(q, K, V, cs, label, SparsityConfig(1.0, k / S))
            errs[i] += np.linalg.norm(y - y_full)
    errs /= 200
    for a, b in zip(errs[:-1], errs[1:]):
        assert b <= a * 1.05
    assert errs[-1] <= 1e-5
