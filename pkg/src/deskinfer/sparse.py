"""Two-stage block-sparse attention over a blockized KV cache.

The cache is partitioned into contiguous key/value blocks of ``block_size``
tokens. Cheap relevance scores come from overlapping mean-pooled key windows
("kernels" of ``kernel_size`` keys every ``kernel_stride`` keys): stage 1
scores each kernel against the query, averages scores across the query heads
that share a KV head, and gives each block the maximum over kernels it
intersects; stage 2 runs ordinary attention over the union of the top-k
blocks and a set of forced blocks (the first ``n_init_blocks`` plus a local
window of ``n_local_blocks`` ending at the query's own block). When the
cache has no more blocks than the combined budget, the result degrades to
dense attention.

A coarser kernel stride (``coarse_stride``) supports a cheap log-sum-exp
estimate whose evaluation count is ``kernel_stride/coarse_stride`` of the
fine pass; the additive ``ln(coarse_stride/kernel_stride)`` correction makes
the estimate exact for uniform score profiles.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .container import ValidationError
from .model import LayerCache, NumericError, logsumexp, softmax_f64


@dataclasses.dataclass
class SparseAttentionConfig:
    block_size: int = 64        # m: tokens per KV block
    kernel_size: int = 32       # p: keys averaged into one kernel
    kernel_stride: int = 16     # s: distance between kernel starts
    coarse_stride: int = 128    # s_c: stride of the coarse LSE kernels
    top_k: int = 8              # k: scored blocks kept per query/group
    n_init_blocks: int = 1      # always-attended leading blocks
    n_local_blocks: int = 2     # always-attended trailing blocks (incl. own)
    forced_consume_budget: bool = False  # forced blocks count against top_k

    def __post_init__(self) -> None:
        if min(self.block_size, self.kernel_size, self.kernel_stride,
               self.coarse_stride, self.top_k) <= 0:
            raise ValidationError("block/kernel/stride/top_k sizes must be positive")
        if self.kernel_stride > self.kernel_size:
            raise ValidationError("kernel_stride must not exceed kernel_size")
        if self.coarse_stride < self.kernel_stride or self.coarse_stride % self.kernel_stride:
            raise ValidationError("coarse_stride must be a multiple of kernel_stride")
        if self.n_init_blocks < 0 or self.n_local_blocks < 0:
            raise ValidationError("forced block counts must be non-negative")


# --------------------------------------------------------------------------
# cache partitioning and kernel pooling


def partition_blocks(length: int, block_size: int) -> list[tuple[int, int]]:
    """Split ``length`` cache rows into (start, end) blocks; last may be short."""
    if block_size <= 0:
        raise ValidationError("block_size must be positive")
    if length < 0:
        raise ValidationError("length must be non-negative")
    return [
        (start, min(start + block_size, length))
        for start in range(0, length, block_size)
    ]


def _window_mean(keys: np.ndarray, start: int, end: int) -> np.ndarray:
    # float64 accumulation, float32 storage; both the incremental update and
    # the full rebuild call this, so rebuilds are bit-identical.
    return np.mean(keys[start:end], axis=0, dtype=np.float64).astype(np.float32)


def build_kernels(keys: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    """Mean-pool overlapping key windows.

    ``keys`` has the cache row dimension first; returns ``floor(l/stride)``
    pooled rows, window j covering keys ``[j*stride, j*stride + kernel_size)``
    clipped to the cache end.
    """
    if kernel_size <= 0 or stride <= 0:
        raise ValidationError("kernel_size and stride must be positive")
    length = keys.shape[0]
    count = length // stride
    means = np.empty((count,) + keys.shape[1:], dtype=np.float32)
    for j in range(count):
        start = j * stride
        means[j] = _window_mean(keys, start, min(start + kernel_size, length))
    return means


class BlockizedLayerCache(LayerCache):
    """A layer cache that keeps pooled kernel means in sync with the keys.

    Fine kernels (stride ``kernel_stride``) drive block selection; coarse
    kernels (stride ``coarse_stride``) drive the approximate LSE. Appends and
    truncations recompute only the windows whose contents changed; a full
    rebuild produces bit-identical means.
    """

    def __init__(self, n_kv_heads: int, head_dim: int, config: SparseAttentionConfig):
        super().__init__(n_kv_heads, head_dim)
        self.config = config
        self.fine_means = np.empty((0, n_kv_heads, head_dim), dtype=np.float32)
        self.coarse_means = np.empty((0, n_kv_heads, head_dim), dtype=np.float32)

    # -- kernel maintenance

    def _resync(self, boundary: int) -> None:
        cfg = self.config
        self.fine_means = self._updated_means(self.fine_means, cfg.kernel_stride, boundary)
        self.coarse_means = self._updated_means(self.coarse_means, cfg.coarse_stride, boundary)

    def _updated_means(self, means: np.ndarray, stride: int, boundary: int) -> np.ndarray:
        count = self.length // stride
        p = self.config.kernel_size
        first = 0 if boundary < p else (boundary - p) // stride + 1
        first = min(first, count)
        out = np.empty((count,) + means.shape[1:], dtype=np.float32)
        out[:first] = means[:first]
        keys = self.keys
        for j in range(first, count):
            start = j * stride
            out[j] = _window_mean(keys, start, min(start + p, self.length))
        return out

    def notify_append(self, old_length: int) -> None:
        self._resync(old_length)

    def notify_truncate(self, old_length: int) -> None:
        self._resync(self.length)

    def rebuild_kernels(self) -> tuple[np.ndarray, np.ndarray]:
        """From-scratch kernel means (fine, coarse); for audit, not caching."""
        return (
            build_kernels(self.keys, self.config.kernel_size, self.config.kernel_stride),
            build_kernels(self.keys, self.config.kernel_size, self.config.coarse_stride),
        )

    @property
    def n_blocks(self) -> int:
        return len(partition_blocks(self.length, self.config.block_size))


def blockized_cache(model_config, sparse_config: SparseAttentionConfig):
    """A KVCache whose layers maintain block/kernel structure."""
    from .model import KVCache

    return KVCache(
        model_config,
        layer_factory=lambda: BlockizedLayerCache(
            model_config.n_kv_heads, model_config.head_dim, sparse_config
        ),
    )


# --------------------------------------------------------------------------
# stage 1: scoring and selection


def kernel_scores(q_head: np.ndarray, kernel_means: np.ndarray) -> np.ndarray:
    """Softmax over kernels of the scaled query/kernel dot products.

    ``q_head`` is one query head (head_dim,); ``kernel_means`` is
    (n_kernels, head_dim). Returns a float64 simplex vector.
    """
    if kernel_means.ndim != 2 or q_head.shape[-1] != kernel_means.shape[-1]:
        raise ValidationError(
            f"kernel mean shape {kernel_means.shape} incompatible with query "
            f"dim {q_head.shape[-1]}"
        )
    if kernel_means.shape[0] == 0:
        raise ValidationError("no kernels to score")
    if not (np.isfinite(q_head).all() and np.isfinite(kernel_means).all()):
        raise NumericError("non-finite values in kernel scoring")
    scale = 1.0 / np.sqrt(q_head.shape[-1])
    dots = (kernel_means @ q_head) * scale
    return softmax_f64(dots)


def group_scores(per_head_scores: np.ndarray) -> np.ndarray:
    """Average per-head kernel scores across the heads sharing a KV head."""
    arr = np.asarray(per_head_scores, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValidationError("expected (n_heads, n_kernels) score matrix")
    return arr.mean(axis=0)


def kernel_range_for_block(
    block: tuple[int, int], kernel_size: int, stride: int, n_kernels: int
) -> tuple[int, int]:
    """Half-open [lo, hi) kernel-index range intersecting a (start, end) block."""
    start, end = block
    lo = 0 if start < kernel_size else (start - kernel_size) // stride + 1
    hi = min(n_kernels, -(-end // stride))
    return min(lo, n_kernels), hi


def block_scores(
    group_kernel_scores: np.ndarray,
    blocks: list[tuple[int, int]],
    kernel_size: int,
    stride: int,
) -> np.ndarray:
    """Per-block relevance: max over the kernels whose window intersects it."""
    scores = np.asarray(group_kernel_scores, dtype=np.float64)
    n_kernels = scores.shape[0]
    out = np.zeros(len(blocks), dtype=np.float64)
    for b, block in enumerate(blocks):
        lo, hi = kernel_range_for_block(block, kernel_size, stride, n_kernels)
        if hi > lo:
            out[b] = scores[lo:hi].max()
    return out


def force_blocks(
    n_blocks: int, query_block: int, n_init: int, n_local: int
) -> np.ndarray:
    """Ascending block ids that bypass scoring: leading + trailing window."""
    if not 0 <= query_block < max(n_blocks, 1):
        raise ValidationError(f"query block {query_block} outside 0..{n_blocks - 1}")
    forced: set[int] = set(range(min(n_init, n_blocks)))
    if n_local > 0:
        forced.update(range(max(0, query_block - n_local + 1), query_block + 1))
    return np.asarray(sorted(forced), dtype=np.int64)


@dataclasses.dataclass
class RelevanceScores:
    """Stage-1 output for one (query token, KV group).

    ``scores`` holds the finite per-block relevance values in [0, 1];
    ``forced`` flags blocks whose selection bypasses the scores (conceptually
    "score = +inf", stored as a mask rather than a non-finite float).
    """

    scores: np.ndarray
    forced: np.ndarray

    def __post_init__(self) -> None:
        if self.scores.shape != self.forced.shape:
            raise ValidationError("scores/forced shape mismatch")


def select_topk(
    scores: np.ndarray,
    k: int,
    forced: np.ndarray,
    *,
    forced_consume_budget: bool = False,
) -> np.ndarray:
    """Forced blocks plus the k best-scoring others, ids sorted ascending.

    Ties break toward the lower block id. With ``forced_consume_budget`` the
    forced blocks count against ``k`` (selection size is at most k, or the
    forced count if that alone exceeds k).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k <= 0:
        raise ValidationError("k must be positive")
    n = scores.shape[0]
    forced = np.asarray(forced, dtype=np.int64)
    if forced.size and (forced.min() < 0 or forced.max() >= n):
        raise ValidationError("forced block id out of range")
    forced_set = set(int(b) for b in forced)
    budget = max(0, k - len(forced_set)) if forced_consume_budget else k
    candidates = np.asarray(
        [i for i in range(n) if i not in forced_set], dtype=np.int64
    )
    if candidates.size and budget > 0:
        order = np.lexsort((candidates, -scores[candidates]))
        chosen = candidates[order[:budget]]
    else:
        chosen = np.empty(0, dtype=np.int64)
    return np.asarray(sorted(forced_set.union(int(c) for c in chosen)), dtype=np.int64)


# --------------------------------------------------------------------------
# log-sum-exp estimation


def exact_lse(q_head: np.ndarray, fine_means: np.ndarray) -> float:
    """Log-sum-exp of scaled query/kernel dots over every fine kernel."""
    if fine_means.shape[0] == 0:
        raise ValidationError("no kernels for exact_lse")
    scale = 1.0 / np.sqrt(q_head.shape[-1])
    return logsumexp((fine_means @ q_head) * scale)


def approx_lse(
    q_head: np.ndarray,
    coarse_means: np.ndarray,
    kernel_stride: int,
    coarse_stride: int,
) -> float:
    """Coarse-kernel estimate of the fine-kernel log-sum-exp.

    Evaluates only ``floor(l/coarse_stride)`` kernels — a
    ``kernel_stride/coarse_stride`` fraction of the fine pass — and adds
    ``ln(coarse_stride/kernel_stride)`` so uniform score profiles are
    estimated without bias (and the estimate is exact when the strides
    coincide).
    """
    if coarse_means.shape[0] == 0:
        raise ValidationError("no coarse kernels for approx_lse")
    if coarse_stride < kernel_stride or coarse_stride % kernel_stride:
        raise ValidationError("coarse_stride must be a multiple of kernel_stride")
    scale = 1.0 / np.sqrt(q_head.shape[-1])
    base = logsumexp((coarse_means @ q_head) * scale)
    return base + float(np.log(coarse_stride / kernel_stride))


# --------------------------------------------------------------------------
# stage 2: attention over the selected blocks


@dataclasses.dataclass
class TouchStats:
    """Instrumented memory-access counts, accumulated per (query, group).

    ``stage1`` counts kernel-mean rows scored, ``stage2`` counts key rows
    gathered for attention; ``samples`` counts (query, group) pairs so the
    per-query figures below are averages."""

    stage1: int = 0
    stage2: int = 0
    dense_rows: int = 0
    samples: int = 0

    def add(self, stage1: int, stage2: int, dense_rows: int) -> None:
        self.stage1 += stage1
        self.stage2 += stage2
        self.dense_rows += dense_rows
        self.samples += 1

    @property
    def sparse_rows(self) -> int:
        return self.stage1 + self.stage2

    @property
    def ratio(self) -> float:
        return self.sparse_rows / self.dense_rows if self.dense_rows else 0.0


def sparse_attend(
    q_heads: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    selected: np.ndarray,
    blocks: list[tuple[int, int]],
    position: int,
    group: int,
    group_size: int,
) -> tuple[np.ndarray, int]:
    """Attention for one query token over the selected blocks of one KV group.

    ``q_heads`` is (group_size, head_dim) — the query heads sharing KV head
    ``group``. Keys/values are the full cache, (l, n_kv_heads, head_dim);
    rows after ``position`` inside the selected blocks are excluded
    (causality). Returns the per-head outputs and the number of key rows
    touched.
    """
    if selected.size == 0:
        raise ValidationError("empty block selection")
    gather: list[np.ndarray] = []
    for b in selected:
        start, end = blocks[int(b)]
        end = min(end, position + 1)
        if start <= position:
            gather.append(np.arange(start, end))
    if not gather:
        raise ValidationError("selection contains no causally visible rows")
    rows = np.concatenate(gather)
    k = keys[rows, group, :]
    v = values[rows, group, :].astype(np.float64)
    scale = 1.0 / np.sqrt(q_heads.shape[-1])
    out = np.empty_like(q_heads, dtype=np.float32)
    for h in range(q_heads.shape[0]):
        scores = (k @ q_heads[h]) * scale
        probs = softmax_f64(scores.astype(np.float64))
        out[h] = (probs @ v).astype(np.float32)
    return out, int(rows.size)


def two_stage_attention(
    q: np.ndarray,
    layer: BlockizedLayerCache,
    config: SparseAttentionConfig,
    start_position: int,
    *,
    stats: Optional[TouchStats] = None,
    traces: Optional[list] = None,
) -> np.ndarray:
    """Block-sparse attention for ``q`` of shape (n, n_q_heads, head_dim).

    Query row i sits at absolute position ``start_position + i`` and may only
    attend cache rows at or before it. Selection is recomputed per query
    token and per KV group: causally visible kernels are scored per head,
    softmax-normalized, averaged across the group's heads, reduced to a
    per-block maximum, then the forced blocks and the top-k rest are
    attended. With no more blocks than the combined budget every block is
    selected and the output matches dense attention.
    """
    n, n_q_heads, head_dim = q.shape
    if layer.n_kv_heads and n_q_heads % layer.n_kv_heads:
        raise ValidationError("query heads not divisible by KV heads")
    group_size = n_q_heads // layer.n_kv_heads
    cfg = config
    out = np.empty((n, n_q_heads, head_dim), dtype=np.float32)
    keys, values = layer.keys, layer.values
    fine = layer.fine_means

    for i in range(n):
        pos = start_position + i
        if pos >= layer.length:
            raise ValidationError(
                f"query position {pos} beyond cache length {layer.length}"
            )
        n_cand = pos // cfg.block_size + 1
        blocks = [
            (b * cfg.block_size, min((b + 1) * cfg.block_size, pos + 1))
            for b in range(n_cand)
        ]
        n_kernels = min(pos // cfg.kernel_stride + 1, fine.shape[0])
        query_block = pos // cfg.block_size
        forced = force_blocks(n_cand, query_block, cfg.n_init_blocks, cfg.n_local_blocks)
        for g in range(layer.n_kv_heads):
            q_heads = q[i, g * group_size : (g + 1) * group_size, :]
            if n_kernels > 0:
                per_head = np.stack(
                    [kernel_scores(q_heads[h], fine[:n_kernels, g, :])
                     for h in range(group_size)]
                )
                gscores = group_scores(per_head)
                bscores = block_scores(
                    gscores, blocks, cfg.kernel_size, cfg.kernel_stride
                )
            else:
                bscores = np.zeros(n_cand, dtype=np.float64)
            relevance = RelevanceScores(
                scores=bscores,
                forced=np.isin(np.arange(n_cand), forced),
            )
            selected = select_topk(
                relevance.scores,
                cfg.top_k,
                forced,
                forced_consume_budget=cfg.forced_consume_budget,
            )
            result, touched = sparse_attend(
                q_heads, keys, values, selected, blocks, pos, g, group_size
            )
            out[i, g * group_size : (g + 1) * group_size, :] = result
            if stats is not None:
                stats.add(stage1=n_kernels, stage2=touched, dense_rows=pos + 1)
            if traces is not None:
                traces.append(
                    {
                        "query_pos": int(pos),
                        "group": int(g),
                        "forced": [int(b) for b in forced],
                        "selected": [int(b) for b in selected],
                        "scores_topk": [float(relevance.scores[b]) for b in selected],
                    }
                )
    return out
