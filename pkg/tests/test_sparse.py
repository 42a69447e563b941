"""Two-stage block-sparse attention: oracles for every stage plus full-stack checks."""

import math

import numpy as np
import pytest

from deskinfer.container import ValidationError
from deskinfer.model import ModelConfig, dense_attention, forward, logsumexp, random_bundle
from deskinfer.sparse import (
    BlockizedLayerCache,
    RelevanceScores,
    SparseAttentionConfig,
    TouchStats,
    approx_lse,
    block_scores,
    build_kernels,
    exact_lse,
    force_blocks,
    group_scores,
    kernel_range_for_block,
    kernel_scores,
    partition_blocks,
    select_topk,
    sparse_attend,
    two_stage_attention,
)


def small_config(**overrides) -> SparseAttentionConfig:
    base = dict(
        block_size=8,
        kernel_size=4,
        kernel_stride=2,
        coarse_stride=4,
        top_k=2,
        n_init_blocks=1,
        n_local_blocks=1,
    )
    base.update(overrides)
    return SparseAttentionConfig(**base)


def filled_layer(rng, length, config, n_kv_heads=2, head_dim=4) -> BlockizedLayerCache:
    layer = BlockizedLayerCache(n_kv_heads, head_dim, config)
    layer.append(
        rng.normal(size=(length, n_kv_heads, head_dim)).astype(np.float32),
        rng.normal(size=(length, n_kv_heads, head_dim)).astype(np.float32),
    )
    return layer


# --------------------------------------------------------------------------
# partitioning and pooling


def test_partition_blocks_covers_exactly():
    assert partition_blocks(0, 8) == []
    assert partition_blocks(8, 8) == [(0, 8)]
    assert partition_blocks(20, 8) == [(0, 8), (8, 16), (16, 20)]
    rng = np.random.default_rng(0)
    for _ in range(50):
        length = int(rng.integers(0, 200))
        size = int(rng.integers(1, 40))
        blocks = partition_blocks(length, size)
        flat = [i for s, e in blocks for i in range(s, e)]
        assert flat == list(range(length))
        assert all(e - s <= size for s, e in blocks)


def test_build_kernels_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    for trial in range(30):
        length = int(rng.integers(1, 60))
        size = int(rng.integers(1, 12))
        stride = int(rng.integers(1, 12))
        keys = rng.normal(size=(length, 2, 3)).astype(np.float32)
        got = build_kernels(keys, size, stride)
        count = length // stride
        assert got.shape[0] == count, trial
        for j in range(count):
            start = j * stride
            window = keys[start : min(start + size, length)].astype(np.float64)
            want = window.mean(axis=0).astype(np.float32)
            assert np.array_equal(got[j], want), (trial, j)


def test_kernel_count_is_floor_length_over_stride():
    keys = np.zeros((17, 1, 2), dtype=np.float32)
    assert build_kernels(keys, 4, 2).shape[0] == 8
    assert build_kernels(keys, 4, 16).shape[0] == 1
    assert build_kernels(keys, 4, 18).shape[0] == 0


# --------------------------------------------------------------------------
# scoring


def test_kernel_scores_is_softmax_of_scaled_dots():
    rng = np.random.default_rng(2)
    q = rng.normal(size=6).astype(np.float32)
    means = rng.normal(size=(9, 6)).astype(np.float32)
    got = kernel_scores(q, means)
    dots = (means @ q).astype(np.float64) / math.sqrt(6)
    want = np.exp(dots - dots.max())
    want /= want.sum()
    assert got.dtype == np.float64
    assert abs(got.sum() - 1.0) < 1e-12
    # The inner products round to float32; the softmax itself adds no error.
    assert np.max(np.abs(got - want)) < 1e-6
    # Ordering follows the dot products.
    assert np.array_equal(np.argsort(got), np.argsort(dots))


def test_group_scores_averages_heads():
    rng = np.random.default_rng(3)
    per_head = rng.uniform(size=(4, 7))
    assert np.allclose(group_scores(per_head), per_head.mean(axis=0), atol=1e-15)


def test_kernel_range_matches_interval_intersection_scan():
    rng = np.random.default_rng(4)
    for trial in range(200):
        size = int(rng.integers(1, 10))
        stride = int(rng.integers(1, 10))
        n_kernels = int(rng.integers(0, 20))
        start = int(rng.integers(0, 40))
        end = start + int(rng.integers(1, 20))
        lo, hi = kernel_range_for_block((start, end), size, stride, n_kernels)
        want = [
            j
            for j in range(n_kernels)
            if j * stride < end and j * stride + size > start
        ]
        got = list(range(lo, hi))
        # The returned range may include kernels past the block only when the
        # oracle is empty; otherwise it must be the exact intersection set.
        assert got == want or (not want and lo >= hi), (trial, got, want)


def test_block_scores_takes_max_over_intersecting_kernels():
    rng = np.random.default_rng(5)
    for trial in range(50):
        stride = int(rng.integers(1, 6))
        size = int(rng.integers(1, 8))
        length = int(rng.integers(4, 50))
        block_size = int(rng.integers(2, 12))
        blocks = partition_blocks(length, block_size)
        n_kernels = length // stride
        scores = rng.uniform(size=n_kernels)
        got = block_scores(scores, blocks, size, stride)
        for b, (s, e) in enumerate(blocks):
            hits = [
                scores[j]
                for j in range(n_kernels)
                if j * stride < e and j * stride + size > s
            ]
            want = max(hits) if hits else 0.0
            assert got[b] == pytest.approx(want, abs=0), (trial, b)


def test_force_blocks_examples_and_properties():
    assert force_blocks(10, 5, 1, 2).tolist() == [0, 4, 5]
    assert force_blocks(10, 0, 2, 2).tolist() == [0, 1]
    assert force_blocks(3, 2, 0, 1).tolist() == [2]
    assert force_blocks(1, 0, 4, 4).tolist() == [0]
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        qb = int(rng.integers(0, n))
        ni = int(rng.integers(0, 5))
        nl = int(rng.integers(0, 5))
        forced = force_blocks(n, qb, ni, nl)
        assert np.all(np.diff(forced) > 0)
        assert forced.size == 0 or (forced[0] >= 0 and forced[-1] < n)
        for b in range(min(ni, n)):
            assert b in forced
        if nl > 0:
            assert qb in forced


def test_select_topk_matches_exhaustive_sort_oracle():
    rng = np.random.default_rng(7)
    for trial in range(300):
        n = int(rng.integers(1, 20))
        k = int(rng.integers(1, n + 2))
        # Coarse value grid makes ties common.
        scores = rng.integers(0, 4, size=n).astype(np.float64) / 4.0
        n_forced = int(rng.integers(0, min(n, 4) + 1))
        forced = rng.choice(n, size=n_forced, replace=False).astype(np.int64)
        got = select_topk(scores, k, forced)
        # Oracle: stable sort by (-score, id) over non-forced ids.
        rest = [i for i in range(n) if i not in set(forced.tolist())]
        rest.sort(key=lambda i: (-scores[i], i))
        want = sorted(set(forced.tolist()) | set(rest[:k]))
        assert got.tolist() == want, (trial, scores.tolist(), forced.tolist(), k)


def test_select_topk_tie_breaks_toward_lower_id():
    scores = np.array([0.5, 0.9, 0.9, 0.9, 0.1])
    assert select_topk(scores, 2, np.array([], dtype=np.int64)).tolist() == [1, 2]
    uniform = np.ones(6)
    assert select_topk(uniform, 3, np.array([], dtype=np.int64)).tolist() == [0, 1, 2]


def test_select_topk_forced_outside_budget_by_default():
    scores = np.array([0.1, 0.2, 0.3, 0.4])
    got = select_topk(scores, 2, np.array([0], dtype=np.int64))
    assert got.tolist() == [0, 2, 3]  # forced 0 plus top-2 of the rest
    budgeted = select_topk(
        scores, 2, np.array([0], dtype=np.int64), forced_consume_budget=True
    )
    assert budgeted.tolist() == [0, 3]  # forced 0 consumes one of the two slots


def test_relevance_scores_validates_shapes():
    with pytest.raises(ValidationError):
        RelevanceScores(scores=np.zeros(3), forced=np.zeros(4, dtype=bool))


# --------------------------------------------------------------------------
# log-sum-exp estimation


def test_approx_lse_equals_exact_when_strides_coincide():
    rng = np.random.default_rng(8)
    cfg = small_config()
    for trial in range(20):
        length = int(rng.integers(8, 80))
        keys = rng.normal(size=(length, 1, 4)).astype(np.float32)
        q = rng.normal(size=4).astype(np.float32)
        fine = build_kernels(keys, cfg.kernel_size, cfg.kernel_stride)[:, 0, :]
        exact = exact_lse(q, fine)
        same = approx_lse(q, fine, cfg.kernel_stride, cfg.kernel_stride)
        assert same == exact, trial


def test_approx_lse_evaluates_fewer_kernels_and_corrects_bias():
    rng = np.random.default_rng(9)
    length = 64
    keys = rng.normal(size=(length, 1, 4)).astype(np.float32)
    q = rng.normal(size=4).astype(np.float32)
    s = 2
    for ratio in (2, 4, 8):
        coarse = build_kernels(keys, 4, s * ratio)[:, 0, :]
        fine = build_kernels(keys, 4, s)[:, 0, :]
        # Evaluation count drops by exactly the stride ratio.
        assert fine.shape[0] == coarse.shape[0] * ratio
        approx = approx_lse(q, coarse, s, s * ratio)
        # The additive correction equals ln(ratio).
        assert approx == pytest.approx(
            logsumexp((coarse @ q) / 2.0) + math.log(ratio), abs=1e-12
        )
    # Uniform keys: every kernel mean is identical, so the estimate is exact.
    flat = np.ones((length, 1, 4), dtype=np.float32)
    fine_flat = build_kernels(flat, 4, s)[:, 0, :]
    coarse_flat = build_kernels(flat, 4, s * 4)[:, 0, :]
    assert approx_lse(q, coarse_flat, s, s * 4) == pytest.approx(
        exact_lse(q, fine_flat), abs=1e-9
    )


def test_approx_lse_rejects_incompatible_strides():
    means = np.ones((4, 4), dtype=np.float32)
    q = np.ones(4, dtype=np.float32)
    with pytest.raises(ValidationError):
        approx_lse(q, means, 4, 6)
    with pytest.raises(ValidationError):
        approx_lse(q, means, 4, 2)


# --------------------------------------------------------------------------
# kernel cache maintenance


def test_incremental_kernel_means_match_rebuild_bitwise():
    rng = np.random.default_rng(10)
    cfg = small_config()
    layer = BlockizedLayerCache(2, 4, cfg)
    for step in range(40):
        n_new = int(rng.integers(1, 5))
        layer.append(
            rng.normal(size=(n_new, 2, 4)).astype(np.float32),
            rng.normal(size=(n_new, 2, 4)).astype(np.float32),
        )
        if step % 7 == 3 and layer.length > 4:
            layer.truncate(layer.length - int(rng.integers(1, 4)))
        fine, coarse = layer.rebuild_kernels()
        assert np.array_equal(layer.fine_means, fine), step
        assert np.array_equal(layer.coarse_means, coarse), step


# --------------------------------------------------------------------------
# full two-stage stack


def test_dense_degradation_when_budget_covers_all_blocks():
    rng = np.random.default_rng(11)
    cfg = small_config(top_k=8, n_init_blocks=1, n_local_blocks=2)
    # 5 blocks of size 8 at length 40 <= 8+1+2 budget: selection is everything.
    length, hq, hkv, hd = 40, 4, 2, 4
    layer = filled_layer(rng, length, cfg, hkv, hd)
    q = rng.normal(size=(3, hq, hd)).astype(np.float32)
    start = length - 3
    sparse_out = two_stage_attention(q, layer, cfg, start)
    dense_out = dense_attention(
        q.reshape(3, hq * hd),
        layer.keys.reshape(length, hkv * hd),
        layer.values.reshape(length, hkv * hd),
        n_q_heads=hq,
        n_kv_heads=hkv,
        causal_offset=start,
    )
    assert np.max(np.abs(sparse_out.reshape(3, -1) - dense_out)) < 1e-5


def test_sparse_attend_all_blocks_equals_dense_single_query():
    rng = np.random.default_rng(12)
    length, hd = 20, 4
    keys = rng.normal(size=(length, 1, hd)).astype(np.float32)
    values = rng.normal(size=(length, 1, hd)).astype(np.float32)
    q = rng.normal(size=(2, hd)).astype(np.float32)
    blocks = partition_blocks(length, 8)
    out, touched = sparse_attend(
        q, keys, values, np.arange(len(blocks)), blocks, length - 1, 0, 2
    )
    assert touched == length
    dense = dense_attention(
        q.reshape(1, -1).repeat(1, axis=0),
        keys.reshape(length, hd),
        values.reshape(length, hd),
        n_q_heads=2,
        n_kv_heads=1,
        causal_offset=length - 1,
    )
    # Single query with both heads sharing the lone KV head.
    assert np.max(np.abs(out.reshape(1, -1) - dense)) < 1e-6


def test_causality_rows_after_query_are_untouchable():
    rng = np.random.default_rng(13)
    cfg = small_config()
    layer = filled_layer(rng, 30, cfg)
    q = rng.normal(size=(1, 4, 4)).astype(np.float32)
    mid = 17
    out_mid = two_stage_attention(q, layer, cfg, mid)
    # Rewriting every row after `mid` must not change the output.
    layer2 = BlockizedLayerCache(2, 4, cfg)
    keys2 = layer.keys.copy()
    values2 = layer.values.copy()
    keys2[mid + 1 :] = 99.0
    values2[mid + 1 :] = -99.0
    layer2.append(keys2, values2)
    out_tampered = two_stage_attention(q, layer2, cfg, mid)
    assert np.array_equal(out_mid, out_tampered)


def test_planted_block_is_selected_and_traced():
    rng = np.random.default_rng(14)
    cfg = small_config(block_size=8, top_k=1, n_init_blocks=1, n_local_blocks=1)
    length, hkv, hd = 64, 1, 4
    direction = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
    keys = rng.normal(scale=0.05, size=(length, hkv, hd)).astype(np.float32)
    values = rng.normal(scale=0.05, size=(length, hkv, hd)).astype(np.float32)
    planted = 3  # rows 24..32: far from both forced regions
    keys[24:32, 0, :] = 5.0 * direction
    layer = BlockizedLayerCache(hkv, hd, cfg)
    layer.append(keys, values)
    q = np.tile(5.0 * direction, (1, 2, 1)).astype(np.float32)
    traces: list = []
    stats = TouchStats()
    two_stage_attention(q, layer, cfg, length - 1, stats=stats, traces=traces)
    trace = traces[0]
    assert planted in trace["selected"]
    assert trace["forced"] == [0, 7]
    # Score of the planted block dominates the other scored picks.
    scored = dict(zip(trace["selected"], trace["scores_topk"]))
    others = [v for b, v in scored.items() if b not in (0, 7, planted)]
    assert all(scored[planted] > v for v in others) if others else True


def test_touch_stats_formula_exact():
    rng = np.random.default_rng(15)
    cfg = small_config(block_size=8, kernel_stride=2, top_k=2,
                       n_init_blocks=1, n_local_blocks=1)
    length, hkv = 50, 2
    layer = filled_layer(rng, length, cfg, hkv, 4)
    q = rng.normal(size=(1, 4, 4)).astype(np.float32)
    stats = TouchStats()
    traces: list = []
    pos = length - 1
    two_stage_attention(q, layer, cfg, pos, stats=stats, traces=traces)
    assert stats.samples == hkv
    # Stage 1 touches floor((pos+1)/stride) kernel means per group (the last
    # kernel exists only once stride rows beyond it are cached).
    expected_stage1 = min(pos // cfg.kernel_stride + 1, length // cfg.kernel_stride)
    assert stats.stage1 == expected_stage1 * hkv
    # Stage 2 touches the causally clipped rows of each selected block.
    total = 0
    for trace in traces:
        for b in trace["selected"]:
            start = b * cfg.block_size
            end = min((b + 1) * cfg.block_size, pos + 1)
            total += max(0, end - start)
    assert stats.stage2 == total
    assert stats.dense_rows == (pos + 1) * hkv


def test_two_stage_rejects_position_beyond_cache():
    rng = np.random.default_rng(16)
    cfg = small_config()
    layer = filled_layer(rng, 10, cfg)
    q = rng.normal(size=(1, 4, 4)).astype(np.float32)
    with pytest.raises(ValidationError):
        two_stage_attention(q, layer, cfg, 10)


def test_forward_sparse_backend_matches_dense_on_short_input():
    # End-to-end: with few blocks the sparse backend degrades to dense.
    mcfg = ModelConfig(hidden_dim=16, n_layers=2, n_q_heads=4, n_kv_heads=2,
                       head_dim=4, vocab_size=31, max_seq_len=512, ffn_dim=24)
    scfg = SparseAttentionConfig(block_size=8, kernel_size=4, kernel_stride=2,
                                 coarse_stride=4, top_k=4, n_init_blocks=1,
                                 n_local_blocks=2)
    bundle = random_bundle(mcfg, seed=17)
    rng = np.random.default_rng(18)
    tokens = rng.integers(0, mcfg.vocab_size, size=24).astype(np.int64)
    dense_logits = forward(bundle, tokens).logits
    from deskinfer.sparse import blockized_cache

    cache = blockized_cache(mcfg, scfg)
    rows = [
        forward(bundle, tokens[i : i + 1], cache, backend="sparse",
                sparse_config=scfg).logits[0]
        for i in range(tokens.size)
    ]
    assert np.max(np.abs(np.stack(rows) - dense_logits)) < 1e-5


def test_config_validation():
    with pytest.raises(ValidationError):
        SparseAttentionConfig(block_size=0)
    with pytest.raises(ValidationError):
        SparseAttentionConfig(kernel_stride=24, kernel_size=16)  # stride > size
    with pytest.raises(ValidationError):
        SparseAttentionConfig(coarse_stride=24)  # not a multiple of stride
    with pytest.raises(ValidationError):
        SparseAttentionConfig(top_k=0)
