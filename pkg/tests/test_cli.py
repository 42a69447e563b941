"""Command-line surface: exit codes, stream identity, report files, determinism."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from deskinfer.cli import main
from deskinfer.container import load_tensors
from deskinfer.corpus import BYTE_VOCAB_SIZE
from deskinfer.model import ModelConfig, load_model, random_bundle, save_model
from deskinfer.mtp import has_mtp_head
from deskinfer.vocab import load_vocab


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A toy byte-vocabulary model container plus corpus files."""
    root = tmp_path_factory.mktemp("cli")
    cfg = ModelConfig(
        hidden_dim=32, n_layers=2, n_q_heads=4, n_kv_heads=2, head_dim=8,
        vocab_size=BYTE_VOCAB_SIZE, max_seq_len=4096, ffn_dim=48,
    )
    bundle = random_bundle(cfg, seed=1)
    model = root / "model.cpm4"
    save_model(bundle, model)

    corpus = root / "corpus.txt"
    corpus.write_bytes(b"the quick brown fox jumps over the lazy dog. " * 50)

    noisy = root / "noisy.txt"
    rng = np.random.default_rng(0)
    noisy.write_bytes(bytes(rng.integers(32, 127, size=1500).tolist()))

    empty = root / "empty.txt"
    empty.write_bytes(b"")
    return {"root": root, "model": str(model), "corpus": str(corpus),
            "noisy": str(noisy), "empty": str(empty)}


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# --------------------------------------------------------------------------
# exit discipline


def test_usage_errors_exit_two(workdir, capsys):
    for argv in (
        [],
        ["generate"],                                 # missing --model
        ["generate", "--model", workdir["model"], "--bogus-flag"],
        ["generate", "--model", workdir["model"], "--spec", "nonsense"],
        ["quantize", "--model", workdir["model"]],    # missing --corpus/--out
    ):
        with pytest.raises(SystemExit) as excinfo:
            main(argv)
        assert excinfo.value.code == 2, argv
        capsys.readouterr()


def test_tree_budget_without_speculation_is_a_usage_error(workdir, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["generate", "--model", workdir["model"], "--tree-budget", "4"])
    assert excinfo.value.code == 2
    assert "tree drafts require speculative mode" in capsys.readouterr().err


def test_quant_without_corpus_is_a_usage_error(workdir, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["generate", "--model", workdir["model"], "--quant"])
    assert excinfo.value.code == 2
    assert "--quant requires --corpus" in capsys.readouterr().err


def test_runtime_failures_exit_one(workdir, capsys):
    code, _, err = run(["generate", "--model", "/no/such/file.cpm4"], capsys)
    assert code == 1 and err.startswith("error:")
    code, _, err = run(
        ["build-vocab", "--corpus", workdir["empty"],
         "--out", str(workdir["root"] / "v.json")], capsys)
    assert code == 1 and "is empty" in err
    code, _, err = run(["build-vocab", "--out", str(workdir["root"] / "v.json")],
                       capsys)
    assert code == 1 and "provide --corpus FILE or --zipf-vocab N" in err
    code, _, err = run(["bench-attn", "--lengths", "a,b"], capsys)
    assert code == 1 and "--lengths expects comma-separated integers" in err


def test_module_entry_point_prints_usage():
    proc = subprocess.run(
        [sys.executable, "-m", "deskinfer.cli", "--help"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "generate" in proc.stdout and "bench-attn" in proc.stdout


# --------------------------------------------------------------------------
# generate


def test_speculative_streams_match_plain_decoding(workdir, capsys, tmp_path):
    base = ["generate", "--model", workdir["model"], "--prompt", "hello",
            "--max-new-tokens", "24"]
    code, plain, err = run(base + ["--out", str(tmp_path / "plain")], capsys)
    assert code == 0
    assert "generated" in err  # timings are stderr-only

    code, chain, _ = run(base + ["--spec", "--out", str(tmp_path / "chain")], capsys)
    assert code == 0 and chain == plain
    code, tree, _ = run(base + ["--spec", "--tree-budget", "6"], capsys)
    assert code == 0 and tree == plain

    out = tmp_path / "plain" / "generated.txt"
    assert out.read_text() + "\n" == plain
    assert not (tmp_path / "plain" / "spec_stats.csv").exists()
    stats = (tmp_path / "chain" / "spec_stats.csv").read_text().splitlines()
    assert stats[0] == "step,drafted,accepted,bonus,head_macs_draft,head_macs_full"
    assert len(stats) > 1


def test_short_prompts_decode_identically_under_the_sparse_backend(workdir, capsys):
    base = ["generate", "--model", workdir["model"], "--prompt", "sparse check",
            "--max-new-tokens", "16"]
    _, dense, _ = run(base, capsys)
    code, sparse, _ = run(base + ["--sparse"], capsys)
    assert code == 0 and sparse == dense  # few blocks -> selection covers all


def test_sampling_is_seeded(workdir, capsys):
    base = ["generate", "--model", workdir["model"], "--prompt", "x",
            "--max-new-tokens", "24", "--sample", "--temperature", "1.2"]
    _, first, _ = run(base + ["--seed", "7"], capsys)
    _, again, _ = run(base + ["--seed", "7"], capsys)
    _, other, _ = run(base + ["--seed", "8"], capsys)
    assert first == again
    assert first != other


def test_spec_mtp_requires_a_trained_head(workdir, capsys):
    code, _, err = run(
        ["generate", "--model", workdir["model"], "--prompt", "x", "--spec", "mtp"],
        capsys)
    assert code == 1
    assert "model carries no draft head" in err


def test_quantized_decoding_runs(workdir, capsys):
    code, out, _ = run(
        ["generate", "--model", workdir["model"], "--prompt", "q",
         "--max-new-tokens", "8", "--quant", "--corpus", workdir["corpus"]],
        capsys)
    assert code == 0
    assert out.endswith("\n")


# --------------------------------------------------------------------------
# train-mtp, then speculate with the trained head


def test_train_mtp_writes_curve_and_container(workdir, capsys, tmp_path):
    out = tmp_path / "mtp"
    code, stdout, _ = run(
        ["train-mtp", "--model", workdir["model"], "--corpus", workdir["corpus"],
         "--steps", "6", "--lr", "0.05", "--window", "8", "--out", str(out)],
        capsys)
    assert code == 0
    assert "L_NTP" in stdout
    curve = (out / "losses.csv").read_text().splitlines()
    assert curve[0] == "step,L_NTP,L_MTP,L"
    assert len(curve) == 7
    first = curve[1].split(",")
    assert first[0] == "0"
    l_ntp, l_mtp, total = (float(v) for v in first[1:])
    assert abs(total - (l_ntp + 0.3 * l_mtp)) < 1e-8

    trained = load_model(out / "model_mtp.cpm4")
    assert has_mtp_head(trained)

    # the trained container drives head-drafted speculation losslessly
    base = ["generate", "--model", str(out / "model_mtp.cpm4"), "--prompt", "go",
            "--max-new-tokens", "20"]
    _, plain, _ = run(base, capsys)
    code, spec, _ = run(base + ["--spec", "mtp"], capsys)
    assert code == 0 and spec == plain
    code, reduced, _ = run(
        base + ["--spec", "mtp", "--fraction", "0.25",
                "--corpus", workdir["corpus"]], capsys)
    assert code == 0 and reduced == plain


def test_train_mtp_divergence_exits_one_with_partial_curve(workdir, capsys, tmp_path):
    out = tmp_path / "diverged"
    code, _, err = run(
        ["train-mtp", "--model", workdir["model"], "--corpus", workdir["noisy"],
         "--steps", "40", "--lr", "8.0", "--window", "8", "--out", str(out)],
        capsys)
    assert code == 1
    assert "error:" in err and "exceeded 10x initial" in err
    curve = (out / "losses.csv").read_text().splitlines()
    assert curve[0] == "step,L_NTP,L_MTP,L"
    assert 1 < len(curve) < 41
    assert not (out / "model_mtp.cpm4").exists()


# --------------------------------------------------------------------------
# bench-attn


def test_bench_reports_the_canonical_touch_ratios(workdir, capsys, tmp_path):
    out = tmp_path / "bench"
    code, stdout, _ = run(
        ["bench-attn", "--lengths", "512,2048,8192", "--out", str(out)], capsys)
    assert code == 0
    lines = stdout.strip().splitlines()
    header = lines[0].split(",")
    assert header == ["length", "n_blocks", "stage1_rows", "stage2_rows",
                      "dense_rows", "attended_ratio", "touched_ratio",
                      "macs_sparse", "macs_dense", "max_abs_diff"]
    rows = {int(l.split(",")[0]): dict(zip(header, l.split(","))) for l in lines[1:]}
    assert float(rows[512]["attended_ratio"]) == 1.0
    assert float(rows[512]["touched_ratio"]) == 1.0625
    assert float(rows[2048]["touched_ratio"]) == 0.40625
    assert int(rows[8192]["stage2_rows"]) == 704
    assert float(rows[8192]["max_abs_diff"]) < 1.0  # approximate beyond the budget
    assert float(rows[512]["max_abs_diff"]) < 1e-5  # dense degradation regime
    # ratios fall as the context grows
    ratios = [float(rows[l]["touched_ratio"]) for l in (512, 2048, 8192)]
    assert ratios == sorted(ratios, reverse=True)

    body = (out / "bench.csv").read_text().strip().splitlines()
    assert body == lines
    assert (out / "traces.jsonl").exists()
    config = json.loads((out / "config.json").read_text())
    assert config["lengths"] == [512, 2048, 8192]


def test_bench_outputs_are_byte_deterministic(workdir, capsys, tmp_path):
    args = ["bench-attn", "--lengths", "512,1024"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(args + ["--out", str(a)], capsys)[0] == 0
    assert run(args + ["--out", str(b)], capsys)[0] == 0
    for name in ("bench.csv", "traces.jsonl", "config.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# --------------------------------------------------------------------------
# build-vocab


def test_build_vocab_from_byte_corpus(workdir, capsys, tmp_path):
    path = tmp_path / "vocab.json"
    code, stdout, _ = run(
        ["build-vocab", "--corpus", workdir["corpus"], "--fraction", "0.25",
         "--out", str(path)], capsys)
    assert code == 0
    # ceil(0.25 * 259) = 65 ranked ids plus the three reserved ids
    assert "vocab_size=259 subset_size=68" in stdout
    vocab = load_vocab(path)
    assert vocab.subset_size == 68
    assert vocab.reduction_factor == 259 / 68


def test_build_vocab_from_synthetic_stream(workdir, capsys, tmp_path):
    path = tmp_path / "zipf.json"
    code, stdout, _ = run(
        ["build-vocab", "--zipf-vocab", "1000", "--tokens", "20000",
         "--fraction", "0.1", "--out", str(path)], capsys)
    assert code == 0
    assert "subset_size=100" in stdout
    cov = float(stdout.split("coverage=")[1].split()[0])
    assert cov > 0.5  # power-law mass concentrates in the top ranks


# --------------------------------------------------------------------------
# quantize


def test_quantize_writes_container_report_and_summary(workdir, capsys, tmp_path):
    out = tmp_path / "q"
    code, stdout, _ = run(
        ["quantize", "--model", workdir["model"], "--corpus", workdir["corpus"],
         "--group-size", "16", "--mode", "prefix", "--prefix-s", "4",
         "--out", str(out)], capsys)
    assert code == 0
    assert "quantized 14 linears" in stdout  # 2 layers x 7 block linears

    csv = (out / "quant_eval.csv").read_text().splitlines()
    assert csv[0] == "layer,proxy_all,proxy_tail,proxy_tail_full_calib,tail_win"
    assert len(csv) == 15

    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "prefix" and summary["prefix_s"] == 4
    assert summary["n_layers_quantized"] == 14
    assert 0 <= summary["tail_wins_vs_full_calibration"] <= 14

    tensors, meta = load_tensors(out / "model_q4.cpm4")
    assert meta["__quant__"]["mode"] == "prefix"
    assert "layers.0.attn.wq" in tensors
    requantized = load_model(out / "model_q4.cpm4")
    assert requantized.params["layers.0.attn.wq"].shape == (32, 32)


def test_full_mode_equals_a_zero_prefix_threshold(workdir, capsys, tmp_path):
    common = ["quantize", "--model", workdir["model"],
              "--corpus", workdir["corpus"], "--group-size", "16"]
    a, b = tmp_path / "full", tmp_path / "s0"
    assert run(common + ["--mode", "full", "--out", str(a)], capsys)[0] == 0
    assert run(common + ["--mode", "prefix", "--prefix-s", "0", "--out", str(b)],
               capsys)[0] == 0
    for name in ("model_q4.cpm4", "quant_eval.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# --------------------------------------------------------------------------
# niah


def test_niah_grid_passes_and_controls_report_na(workdir, capsys, tmp_path):
    out = tmp_path / "niah"
    code, stdout, _ = run(
        ["niah", "--lengths", "1024,2048", "--depths", "0,100",
         "--out", str(out)], capsys)
    assert code == 0
    table = stdout.splitlines()
    assert table[0].split() == ["length", "0%", "100%"]
    assert "FAIL" not in stdout

    grid = (out / "grid.csv").read_text().splitlines()
    assert grid[0] == "length,depth_pct,needle_block,selected_hit,signature_cosine,passed"
    assert len(grid) == 5

    code, control, _ = run(
        ["niah", "--lengths", "1024", "--depths", "50", "--no-needle"], capsys)
    assert code == 0
    assert "n/a" in control and "PASS" not in control and "FAIL" not in control


def test_niah_grid_is_byte_deterministic(workdir, capsys, tmp_path):
    args = ["niah", "--lengths", "1024", "--depths", "0,100"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(args + ["--out", str(a)], capsys)[0] == 0
    assert run(args + ["--out", str(b)], capsys)[0] == 0
    for name in ("grid.csv", "traces.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
