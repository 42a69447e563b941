"""Attention cost benchmarking and synthetic needle retrieval.

Both tools work at the attention level with synthetic keys and values, so
they measure the selection mechanism itself — no model weights involved.
All reported numbers are operation counts or exact comparisons; wall time
is never part of a report row.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional

import numpy as np

from .container import ValidationError, atomic_write
from .model import dense_attention
from .sparse import BlockizedLayerCache, SparseAttentionConfig, TouchStats, two_stage_attention


def _filled_layer(
    keys: np.ndarray, values: np.ndarray, config: SparseAttentionConfig
) -> BlockizedLayerCache:
    layer = BlockizedLayerCache(keys.shape[1], keys.shape[2], config)
    layer.append(keys.astype(np.float32), values.astype(np.float32))
    return layer


# --------------------------------------------------------------------------
# attention benchmark


@dataclasses.dataclass
class BenchRow:
    """Per-length cost accounting for one decode query.

    ``stage1_rows``/``stage2_rows`` are per (query, KV group): pooled
    kernels scored, then key rows gathered. ``attended_ratio`` compares the
    gathered rows against dense attention's ``length`` rows;
    ``touched_ratio`` adds the stage-1 kernel reads on top. MAC counts
    cover score and value-mix multiplies for all query heads.
    """

    length: int
    n_blocks: int
    stage1_rows: float
    stage2_rows: float
    dense_rows: int
    attended_ratio: float
    touched_ratio: float
    macs_sparse: int
    macs_dense: int
    max_abs_diff: float

    COLUMNS = ("length", "n_blocks", "stage1_rows", "stage2_rows", "dense_rows",
               "attended_ratio", "touched_ratio", "macs_sparse", "macs_dense",
               "max_abs_diff")


def attention_bench(
    lengths,
    config: SparseAttentionConfig,
    *,
    n_q_heads: int = 8,
    n_kv_heads: int = 2,
    head_dim: int = 8,
    seed: int = 0,
    traces: Optional[list] = None,
) -> list[BenchRow]:
    """Score one end-of-cache decode query per length, sparse vs dense."""
    rows = []
    for length in lengths:
        length = int(length)
        if length < 1:
            raise ValidationError("benchmark lengths must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([seed, length]))
        keys = rng.normal(0.0, 0.5, (length, n_kv_heads, head_dim)).astype(np.float32)
        values = rng.normal(0.0, 0.5, (length, n_kv_heads, head_dim)).astype(np.float32)
        q = rng.normal(0.0, 0.5, (1, n_q_heads, head_dim)).astype(np.float32)
        layer = _filled_layer(keys, values, config)
        stats = TouchStats()
        sparse_out = two_stage_attention(
            q, layer, config, length - 1, stats=stats, traces=traces
        )
        dense_out = dense_attention(
            q.reshape(1, -1),
            keys.reshape(length, -1),
            values.reshape(length, -1),
            n_q_heads=n_q_heads,
            n_kv_heads=n_kv_heads,
            causal_offset=length - 1,
        ).reshape(1, n_q_heads, head_dim)
        group = n_q_heads // n_kv_heads
        macs_sparse = (stats.stage1 + 2 * stats.stage2) * head_dim * group
        macs_dense = 2 * length * head_dim * n_q_heads
        rows.append(BenchRow(
            length=length,
            n_blocks=layer.n_blocks,
            stage1_rows=stats.stage1 / stats.samples,
            stage2_rows=stats.stage2 / stats.samples,
            dense_rows=length,
            attended_ratio=stats.stage2 / (stats.samples * length),
            touched_ratio=(stats.stage1 + stats.stage2) / (stats.samples * length),
            macs_sparse=int(macs_sparse),
            macs_dense=int(macs_dense),
            max_abs_diff=float(np.abs(sparse_out - dense_out).max()),
        ))
    return rows


# --------------------------------------------------------------------------
# synthetic needle retrieval


@dataclasses.dataclass
class NiahRow:
    """One cell of the needle grid.

    ``passed`` is True/False for planted runs and None (printed as "n/a")
    for negative controls, which have nothing to find; their
    ``signature_cosine`` shows how decisively the recovery check fails.
    """

    length: int
    depth_pct: int
    needle_block: int
    selected_hit: bool
    signature_cosine: float
    passed: Optional[bool]

    COLUMNS = ("length", "depth_pct", "needle_block", "selected_hit",
               "signature_cosine", "passed")


NIAH_COSINE_THRESHOLD = 0.8


def niah_cell(
    length: int,
    depth_pct: int,
    config: SparseAttentionConfig,
    *,
    planted: bool = True,
    seed: int = 0,
    n_q_heads: int = 4,
    n_kv_heads: int = 2,
    head_dim: int = 16,
    traces: Optional[list] = None,
) -> NiahRow:
    """Plant a needle block and check the sparse path retrieves it.

    The needle's keys are parallel to the query (guaranteeing top kernel
    relevance) and its values all equal a signature vector; retrieval
    passes when every KV group selects the needle block and the attention
    output points at the signature. Control runs build the same haystack
    but never plant the needle; the signature check must then fail.
    """
    if not 0 <= depth_pct <= 100:
        raise ValidationError("depth must be a percentage in 0..100")
    if length < config.block_size:
        raise ValidationError("length must cover at least one block")
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, length, depth_pct, int(planted)])
    )
    keys = rng.normal(0.0, 0.35, (length, n_kv_heads, head_dim))
    values = rng.normal(0.0, 0.35, (length, n_kv_heads, head_dim))
    directions = rng.normal(0.0, 1.0, (n_kv_heads, head_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    signature = rng.normal(0.0, 1.0, head_dim)
    signature /= np.linalg.norm(signature)

    m = config.block_size
    n_blocks = -(-length // m)
    needle_block = round((n_blocks - 1) * depth_pct / 100)
    if planted:
        lo, hi = needle_block * m, min((needle_block + 1) * m, length)
        for g in range(n_kv_heads):
            keys[lo:hi, g, :] = 4.0 * directions[g]
            values[lo:hi, g, :] = signature

    group = n_q_heads // n_kv_heads
    q = np.empty((1, n_q_heads, head_dim), dtype=np.float32)
    for h in range(n_q_heads):
        q[0, h, :] = 4.0 * directions[h // group]

    layer = _filled_layer(keys, values, config)
    cell_traces: list = []
    out = two_stage_attention(q, layer, config, length - 1, traces=cell_traces)
    if traces is not None:
        traces.extend(cell_traces)
    selected_hit = all(needle_block in t["selected"] for t in cell_traces)
    cosines = [
        float(np.dot(out[0, h], signature)
              / max(float(np.linalg.norm(out[0, h])), 1e-12))
        for h in range(n_q_heads)
    ]
    cosine = min(cosines)
    recovered = selected_hit and cosine > NIAH_COSINE_THRESHOLD
    return NiahRow(
        length=int(length),
        depth_pct=int(depth_pct),
        needle_block=int(needle_block) if planted else -1,
        selected_hit=bool(selected_hit),
        signature_cosine=cosine,
        passed=bool(recovered) if planted else None,
    )


def niah_grid(
    lengths,
    depths,
    config: SparseAttentionConfig,
    *,
    planted: bool = True,
    seed: int = 0,
    traces: Optional[list] = None,
    **geometry,
) -> list[NiahRow]:
    return [
        niah_cell(int(l), int(d), config, planted=planted, seed=seed,
                  traces=traces, **geometry)
        for l in lengths
        for d in depths
    ]


# --------------------------------------------------------------------------
# report files


def _cell_text(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_rows_csv(path, rows, columns) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell_text(getattr(row, c)) for c in columns))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_traces_jsonl(path, traces) -> None:
    lines = [json.dumps(t, sort_keys=True) for t in traces]
    atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_config_json(path, payload: dict) -> None:
    atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))
