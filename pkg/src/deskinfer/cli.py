"""Command-line surface for the toolkit.

Subcommands: ``generate`` (plain or speculative decoding, dense or
block-sparse attention, optionally with weights quantized in memory),
``bench-attn`` (attention cost accounting), ``build-vocab`` (frequency
vocabulary files), ``quantize`` (calibrated 4-bit containers plus an
evaluation report), ``train-mtp`` (toy training of the two-ahead draft
head), and ``niah`` (synthetic needle-retrieval grid).

Conventions: byte-level tokenizer (any file is a corpus); every output
file is written atomically; identical (flags, seed) produce byte-identical
report files; wall-clock timings go to stderr only. Exit codes: 0 success,
2 usage errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import bench
from .container import atomic_write, save_tensors
from .corpus import (
    BOS_ID,
    BYTE_VOCAB_SIZE,
    EOS_ID,
    SPECIAL_IDS,
    decode_bytes,
    encode_bytes,
    zipf_stream,
)
from .model import load_model, save_model
from .mtp import MTPHead, TrainingDivergedError, has_mtp_head, init_mtp_head, train_toy
from .quantize import (
    apply_quantized,
    collect_calibration,
    dequantize,
    proxy_loss,
    quant_eval,
    quantize_bundle,
)
from .sparse import SparseAttentionConfig
from .specdec import MTPDrafter, SelfDrafter, generate, speculative_generate
from .vocab import build_frequency_vocab, coverage, save_vocab


# --------------------------------------------------------------------------
# shared flag groups


def _add_sparse_flags(p: argparse.ArgumentParser) -> None:
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--sparse", action="store_true",
                      help="use two-stage block-sparse attention")
    mode.add_argument("--dense", action="store_true",
                      help="use dense attention (default)")
    p.add_argument("--block-size", type=int, default=64, metavar="M",
                   help="KV block size (default 64)")
    p.add_argument("--kernel-size", type=int, default=32, metavar="P",
                   help="pooling kernel size (default 32)")
    p.add_argument("--stride", type=int, default=16, metavar="S",
                   help="fine kernel stride (default 16)")
    p.add_argument("--coarse-stride", type=int, default=128,
                   help="coarse kernel stride for the approximate LSE (default 128)")
    p.add_argument("--topk", type=int, default=8,
                   help="blocks selected beyond the forced set (default 8)")
    p.add_argument("--init-blocks", type=int, default=1,
                   help="always-attended initial blocks (default 1)")
    p.add_argument("--local-blocks", type=int, default=2,
                   help="always-attended trailing blocks (default 2)")


def _sparse_config(args) -> SparseAttentionConfig:
    return SparseAttentionConfig(
        block_size=args.block_size,
        kernel_size=args.kernel_size,
        kernel_stride=args.stride,
        coarse_stride=args.coarse_stride,
        top_k=args.topk,
        n_init_blocks=args.init_blocks,
        n_local_blocks=args.local_blocks,
    )


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise ValueError(f"{flag} expects at least one value")
    return values


def _read_corpus_tokens(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise ValueError(f"corpus file {path!r} is empty")
    return encode_bytes(data)


def _corpus_windows(tokens: np.ndarray, n_windows: int, width: int) -> list[np.ndarray]:
    if tokens.size < width:
        raise ValueError(
            f"corpus has {tokens.size} tokens; need at least {width} for calibration"
        )
    count = min(n_windows, tokens.size // width)
    return [tokens[i * width : (i + 1) * width] for i in range(max(count, 1))]


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    bundle = load_model(args.model)
    cfg = bundle.config
    backend = "sparse" if args.sparse else "dense"
    sparse_cfg = _sparse_config(args) if args.sparse else None

    corpus_tokens = _read_corpus_tokens(args.corpus) if args.corpus else None
    if args.quant:
        calib = collect_calibration(
            bundle, _corpus_windows(corpus_tokens, 8, min(64, corpus_tokens.size))
        )
        quantized = quantize_bundle(
            bundle, calib, group_size=args.group_size, prefix_s=args.prefix_s
        )
        bundle = apply_quantized(bundle, quantized)

    prompt = np.concatenate([
        np.asarray([BOS_ID], dtype=np.int64) if BOS_ID < cfg.vocab_size else
        np.asarray([], dtype=np.int64),
        encode_bytes(args.prompt.encode("utf-8")),
    ])
    if prompt.size == 0:
        raise ValueError("empty prompt and no sequence-start token in this vocab")
    eos = EOS_ID if EOS_ID < cfg.vocab_size else None
    common = dict(
        max_new_tokens=args.max_new_tokens,
        backend=backend,
        sparse_config=sparse_cfg,
        greedy=not args.sample,
        temperature=args.temperature,
        seed=args.seed,
        eos_id=eos,
    )
    if args.spec is None:
        result = generate(bundle, prompt, **common)
    else:
        if args.spec == "self":
            drafter = SelfDrafter(bundle, backend=backend, sparse_config=sparse_cfg)
        else:
            if not has_mtp_head(bundle):
                raise ValueError(
                    "model carries no draft head; train one with the "
                    "train-mtp subcommand or use --spec self"
                )
            head = MTPHead(bundle)
            vocab = None
            if args.fraction < 1.0:
                if corpus_tokens is None:
                    raise ValueError("--fraction below 1.0 needs --corpus")
                specials = tuple(s for s in SPECIAL_IDS if s < cfg.vocab_size)
                vocab = build_frequency_vocab(
                    corpus_tokens, cfg.vocab_size, args.fraction, specials=specials
                )
            drafter = MTPDrafter(head, vocab=vocab)
        result = speculative_generate(
            bundle, prompt, drafter,
            n_draft=args.n_draft,
            tree_budget=args.tree_budget,
            **common,
        )

    text = decode_bytes(result.tokens).decode("utf-8", errors="replace")
    print(text)
    if args.out:
        out = _ensure_outdir(args.out)
        atomic_write(os.path.join(out, "generated.txt"), text.encode("utf-8"))
        if result.stats is not None:
            result.stats.write_csv(os.path.join(out, "spec_stats.csv"))
    if result.stats is not None:
        _stderr(
            f"rounds={len(result.stats.rounds)} "
            f"mean_accepted={result.stats.mean_accepted:.3f} "
            f"mean_emitted={result.stats.mean_emitted:.3f}"
        )
    _stderr(f"generated {len(result.tokens)} tokens in {time.perf_counter() - t0:.3f}s")
    return 0


# --------------------------------------------------------------------------
# bench-attn


def cmd_bench_attn(args) -> int:
    t0 = time.perf_counter()
    lengths = _parse_int_list(args.lengths, "--lengths")
    cfg = _sparse_config(args)
    traces: list = []
    rows = bench.attention_bench(lengths, cfg, seed=args.seed, traces=traces)
    print(",".join(bench.BenchRow.COLUMNS))
    for row in rows:
        print(",".join(bench._cell_text(getattr(row, c)) for c in bench.BenchRow.COLUMNS))
    if args.out:
        out = _ensure_outdir(args.out)
        bench.write_rows_csv(os.path.join(out, "bench.csv"), rows, bench.BenchRow.COLUMNS)
        bench.write_traces_jsonl(os.path.join(out, "traces.jsonl"), traces)
        bench.write_config_json(
            os.path.join(out, "config.json"),
            {"sparse": dataclasses.asdict(cfg), "lengths": lengths, "seed": args.seed},
        )
    _stderr(f"benchmarked {len(lengths)} lengths in {time.perf_counter() - t0:.3f}s")
    return 0


# --------------------------------------------------------------------------
# build-vocab


def cmd_build_vocab(args) -> int:
    if args.corpus:
        tokens = _read_corpus_tokens(args.corpus)
        vocab_size = BYTE_VOCAB_SIZE
        specials = SPECIAL_IDS
    elif args.zipf_vocab:
        tokens = zipf_stream(args.zipf_vocab, args.tokens, seed=args.seed)
        vocab_size = args.zipf_vocab
        specials = ()
    else:
        raise ValueError("provide --corpus FILE or --zipf-vocab N")
    vocab = build_frequency_vocab(tokens, vocab_size, args.fraction, specials=specials)
    save_vocab(vocab, args.out)
    print(f"vocab_size={vocab.vocab_size} subset_size={vocab.subset_size} "
          f"reduction_factor={vocab.reduction_factor:.6g} "
          f"coverage={coverage(vocab, tokens):.6g}")
    return 0


# --------------------------------------------------------------------------
# quantize


def cmd_quantize(args) -> int:
    t0 = time.perf_counter()
    bundle = load_model(args.model)
    tokens = _read_corpus_tokens(args.corpus)
    windows = _corpus_windows(tokens, args.calib_sequences, args.calib_length)
    calib = collect_calibration(bundle, windows)
    effective_s = 0 if args.mode == "full" else args.prefix_s

    quantized = quantize_bundle(
        bundle, calib, group_size=args.group_size, prefix_s=effective_s,
        symmetric=args.symmetric,
    )
    baseline = quantized if effective_s == 0 else quantize_bundle(
        bundle, calib, group_size=args.group_size, prefix_s=0,
        symmetric=args.symmetric,
    )

    out = _ensure_outdir(args.out)
    tensors: dict = dict(bundle.params)
    tensors.update(quantized)
    save_tensors(
        os.path.join(out, "model_q4.cpm4"),
        tensors,
        meta={
            "__config__": dataclasses.asdict(bundle.config),
            "__quant__": {
                "group_size": args.group_size,
                "mode": "full" if effective_s == 0 else "prefix",
                "prefix_s": effective_s,
                "symmetric": bool(args.symmetric),
            },
        },
    )

    report = quant_eval(bundle, quantized, calib, windows[: min(4, len(windows))])
    lines = ["layer,proxy_all,proxy_tail,proxy_tail_full_calib,tail_win"]
    wins = 0
    for name in sorted(quantized):
        x = calib.activations[name]
        w = bundle.params[name].T
        tail_kwargs = dict(positions=calib.positions, min_position=effective_s)
        tail_sel = proxy_loss(x, w, dequantize(quantized[name]), **tail_kwargs)
        tail_full = proxy_loss(x, w, dequantize(baseline[name]), **tail_kwargs)
        win = int(tail_sel <= tail_full)
        wins += win
        lines.append(
            f"{name},{report.per_layer_proxy[name]:.10g},"
            f"{tail_sel:.10g},{tail_full:.10g},{win}"
        )
    atomic_write(os.path.join(out, "quant_eval.csv"),
                 ("\n".join(lines) + "\n").encode("utf-8"))
    bench.write_config_json(
        os.path.join(out, "summary.json"),
        {
            "group_size": args.group_size,
            "mode": "full" if effective_s == 0 else "prefix",
            "prefix_s": effective_s,
            "n_layers_quantized": len(quantized),
            "tail_wins_vs_full_calibration": wins,
            "max_logit_drift": report.max_logit_drift,
            "mean_logit_drift": report.mean_logit_drift,
        },
    )
    print(f"quantized {len(quantized)} linears: "
          f"max_logit_drift={report.max_logit_drift:.6g} "
          f"mean_logit_drift={report.mean_logit_drift:.6g} "
          f"tail_wins={wins}/{len(quantized)}")
    _stderr(f"quantization finished in {time.perf_counter() - t0:.3f}s")
    return 0


# --------------------------------------------------------------------------
# train-mtp


def cmd_train_mtp(args) -> int:
    t0 = time.perf_counter()
    bundle = load_model(args.model)
    head = MTPHead(bundle) if has_mtp_head(bundle) else init_mtp_head(bundle, seed=args.seed)
    tokens = _read_corpus_tokens(args.corpus)
    out = _ensure_outdir(args.out)

    def write_curve(rows) -> None:
        lines = ["step,L_NTP,L_MTP,L"]
        for step, l_ntp, l_mtp, total in rows:
            lines.append(f"{step},{l_ntp:.10g},{l_mtp:.10g},{total:.10g}")
        atomic_write(os.path.join(out, "losses.csv"),
                     ("\n".join(lines) + "\n").encode("utf-8"))

    try:
        report = train_toy(
            bundle, head, tokens,
            steps=args.steps, lam=args.lam, lr=args.lr,
            window=args.window, seed=args.seed,
        )
    except TrainingDivergedError as exc:
        write_curve(exc.report.rows)
        raise
    write_curve(report.rows)
    save_model(bundle, os.path.join(out, "model_mtp.cpm4"))
    print(f"L_NTP {report.initial_ntp:.6g} -> {report.final_ntp:.6g} "
          f"over {len(report.rows)} steps (lambda={args.lam:g}, lr={args.lr:g})")
    _stderr(f"training finished in {time.perf_counter() - t0:.3f}s")
    return 0


# --------------------------------------------------------------------------
# niah


def cmd_niah(args) -> int:
    t0 = time.perf_counter()
    lengths = _parse_int_list(args.lengths, "--lengths")
    depths = _parse_int_list(args.depths, "--depths")
    cfg = _sparse_config(args)
    traces: list = []
    rows = bench.niah_grid(lengths, depths, cfg, planted=not args.no_needle,
                           seed=args.seed, traces=traces)
    by_cell = {(r.length, r.depth_pct): r for r in rows}
    width = max(len(str(l)) for l in lengths) + 2
    header = "length".ljust(width) + "".join(f"{d}%".rjust(8) for d in depths)
    print(header)
    for l in lengths:
        marks = []
        for d in depths:
            row = by_cell[(l, d)]
            marks.append(("n/a" if row.passed is None
                          else "PASS" if row.passed else "FAIL").rjust(8))
        print(str(l).ljust(width) + "".join(marks))
    if args.out:
        out = _ensure_outdir(args.out)
        bench.write_rows_csv(os.path.join(out, "grid.csv"), rows, bench.NiahRow.COLUMNS)
        bench.write_traces_jsonl(os.path.join(out, "traces.jsonl"), traces)
        bench.write_config_json(
            os.path.join(out, "config.json"),
            {"sparse": dataclasses.asdict(cfg), "lengths": lengths,
             "depths": depths, "seed": args.seed,
             "planted": not args.no_needle},
        )
    _stderr(f"needle grid finished in {time.perf_counter() - t0:.3f}s")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskinfer",
        description="Desk-scale sparse/speculative/quantized inference toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="decode tokens from a model container")
    g.add_argument("--model", required=True, help="model container path")
    g.add_argument("--prompt", default="", help="prompt text (UTF-8 bytes)")
    g.add_argument("--max-new-tokens", type=int, default=64)
    g.add_argument("--corpus", help="byte corpus (vocab subsetting / calibration)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory (text + CSV reports)")
    _add_sparse_flags(g)
    spec = g.add_mutually_exclusive_group()
    spec.add_argument("--spec", nargs="?", const="self", choices=["self", "mtp"],
                      help="speculative decoding with this drafter (default self)")
    spec.add_argument("--no-spec", action="store_true",
                      help="plain decoding (the default)")
    g.add_argument("--fraction", type=float, default=1.0,
                   help="draft-vocabulary fraction for --spec mtp (default 1.0)")
    g.add_argument("--n-draft", type=int, default=4,
                   help="chain draft length (default 4)")
    g.add_argument("--tree-budget", type=int, default=None,
                   help="draft a token tree with this node budget")
    g.add_argument("--quant", action="store_true",
                   help="quantize weights in memory before decoding (needs --corpus)")
    g.add_argument("--group-size", type=int, default=32)
    g.add_argument("--prefix-s", type=int, default=4)
    sample = g.add_mutually_exclusive_group()
    sample.add_argument("--greedy", action="store_true", help="argmax decoding (default)")
    sample.add_argument("--sample", action="store_true", help="temperature sampling")
    g.add_argument("--temperature", type=float, default=1.0)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench-attn", help="attention touch/MAC accounting")
    b.add_argument("--lengths", default="512,2048,8192")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="output directory (CSV, traces, config)")
    _add_sparse_flags(b)
    b.set_defaults(func=cmd_bench_attn)

    v = sub.add_parser("build-vocab", help="frequency-ranked draft vocabulary")
    v.add_argument("--corpus", help="byte corpus file")
    v.add_argument("--zipf-vocab", type=int,
                   help="synthesize a power-law stream over this vocab size")
    v.add_argument("--tokens", type=int, default=65536,
                   help="synthetic stream length (default 65536)")
    v.add_argument("--fraction", type=float, default=0.25)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True, help="vocabulary JSON path")
    v.set_defaults(func=cmd_build_vocab)

    q = sub.add_parser("quantize", help="calibrated 4-bit container + eval report")
    q.add_argument("--model", required=True)
    q.add_argument("--corpus", required=True, help="calibration byte corpus")
    q.add_argument("--group-size", type=int, default=32)
    q.add_argument("--prefix-s", type=int, default=4)
    q.add_argument("--mode", choices=["full", "prefix"], default="prefix",
                   help="calibration rows: all positions or positions >= s")
    q.add_argument("--symmetric", action="store_true",
                   help="zero-centered grids instead of min-max")
    q.add_argument("--calib-sequences", type=int, default=8)
    q.add_argument("--calib-length", type=int, default=64)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train-mtp", help="toy-train the two-ahead draft head")
    t.add_argument("--model", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--window", type=int, default=16)
    t.add_argument("--lambda", dest="lam", type=float, default=0.3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train_mtp)

    n = sub.add_parser("niah", help="synthetic needle-retrieval grid")
    n.add_argument("--lengths", default="1024,4096,16384")
    n.add_argument("--depths", default="0,50,100",
                   help="needle depths as percentages")
    n.add_argument("--no-needle", action="store_true",
                   help="negative control: same haystack, nothing planted")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", help="output directory")
    _add_sparse_flags(n)
    n.set_defaults(func=cmd_niah)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tree_budget", None) is not None and args.spec is None:
        parser.error("tree drafts require speculative mode")
    if getattr(args, "quant", False) and not args.corpus:
        parser.error("--quant requires --corpus for calibration")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
