"""Frequency vocabulary and reduced draft head."""

import math

import numpy as np
import pytest

from deskinfer.container import ValidationError
from deskinfer.corpus import zipf_stream
from deskinfer.vocab import (
    FrequencyVocab,
    ReducedHead,
    StaleHeadError,
    build_frequency_vocab,
    coverage,
    load_vocab,
    reduced_draft_probs,
    save_vocab,
)


def test_ranking_matches_stable_sort_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        v = int(rng.integers(4, 40))
        corpus = rng.integers(0, v, size=int(rng.integers(1, 400))).astype(np.int64)
        vocab = build_frequency_vocab(corpus, v, fraction=0.5)
        counts = np.bincount(corpus, minlength=v)
        want = sorted(range(v), key=lambda i: (-counts[i], i))
        assert vocab.ranked_ids.tolist() == want, trial
        assert np.array_equal(vocab.counts, counts)


def test_subset_size_is_ceil_fraction_times_vocab():
    corpus = np.arange(10, dtype=np.int64)
    for fraction in (0.1, 0.25, 0.33, 0.5, 1.0):
        vocab = build_frequency_vocab(corpus, 10, fraction)
        assert vocab.subset_size == math.ceil(fraction * 10), fraction
        assert vocab.reduction_factor == pytest.approx(10 / vocab.subset_size)


def test_specials_always_kept_without_duplication():
    # Token 9 never occurs, so it is ranked last; as a special it is appended.
    corpus = np.zeros(100, dtype=np.int64)
    vocab = build_frequency_vocab(corpus, 10, 0.2, specials=(9, 0))
    assert 9 in vocab.subset_ids
    assert 0 in vocab.subset_ids
    # 0 is already in the top ranks: no duplicate entry.
    assert len(set(vocab.subset_ids.tolist())) == vocab.subset_size
    vocab.validate()


def test_coverage_matches_recount():
    rng = np.random.default_rng(1)
    for trial in range(20):
        v = 50
        corpus = rng.integers(0, v, size=500).astype(np.int64)
        vocab = build_frequency_vocab(corpus, v, 0.3)
        inside = set(vocab.subset_ids.tolist())
        want = sum(1 for t in corpus if int(t) in inside) / corpus.size
        assert coverage(vocab, corpus) == pytest.approx(want, abs=0), trial


def test_coverage_monotone_in_fraction():
    stream = zipf_stream(200, 5000, seed=2)
    values = [
        coverage(build_frequency_vocab(stream, 200, f), stream)
        for f in (0.05, 0.1, 0.25, 0.5, 1.0)
    ]
    assert values == sorted(values)
    assert values[-1] == 1.0


def test_zipf_stream_concentrates_mass():
    # A power-law stream should put most mass in a small top fraction.
    stream = zipf_stream(1000, 50000, seed=3)
    vocab = build_frequency_vocab(stream, 1000, 0.25)
    assert coverage(vocab, stream) > 0.75


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    corpus = rng.integers(0, 30, size=300).astype(np.int64)
    vocab = build_frequency_vocab(corpus, 30, 0.4, specials=(29,))
    path = tmp_path / "v.json"
    save_vocab(vocab, path)
    loaded = load_vocab(path)
    assert loaded.vocab_size == vocab.vocab_size
    assert loaded.fraction == vocab.fraction
    assert np.array_equal(loaded.counts, vocab.counts)
    assert np.array_equal(loaded.ranked_ids, vocab.ranked_ids)
    assert np.array_equal(loaded.subset_ids, vocab.subset_ids)
    assert loaded.specials == vocab.specials
    # Determinism: a second save produces identical bytes.
    save_vocab(vocab, tmp_path / "v2.json")
    assert (tmp_path / "v.json").read_bytes() == (tmp_path / "v2.json").read_bytes()


def test_build_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        build_frequency_vocab(np.array([], dtype=np.int64), 10, 0.5)
    with pytest.raises(ValidationError):
        build_frequency_vocab(np.array([3]), 10, 0.0)
    with pytest.raises(ValidationError):
        build_frequency_vocab(np.array([10]), 10, 0.5)
    with pytest.raises(ValidationError):
        build_frequency_vocab(np.array([3]), 10, 0.5, specials=(10,))


def test_reduced_head_rows_bit_identical():
    rng = np.random.default_rng(5)
    v, d = 40, 8
    lm_head = rng.normal(size=(v, d)).astype(np.float32)
    corpus = rng.integers(0, v, size=200).astype(np.int64)
    vocab = build_frequency_vocab(corpus, v, 0.25)
    head = ReducedHead(lm_head, vocab)
    for row, token in enumerate(vocab.subset_ids):
        assert np.array_equal(head.weight[row], lm_head[token]), int(token)
    assert head.macs_per_token == vocab.subset_size * d
    assert head.full_macs_per_token == v * d


def test_reduced_probs_zero_outside_subset_and_renormalized():
    rng = np.random.default_rng(6)
    v, d = 24, 6
    lm_head = rng.normal(size=(v, d)).astype(np.float32)
    corpus = rng.integers(0, v, size=100).astype(np.int64)
    vocab = build_frequency_vocab(corpus, v, 0.25)
    head = ReducedHead(lm_head, vocab)
    hidden = rng.normal(size=d).astype(np.float32)
    probs = reduced_draft_probs(hidden, head)
    assert probs.shape == (v,)
    assert abs(probs.sum() - 1.0) < 1e-12
    inside = set(vocab.subset_ids.tolist())
    for t in range(v):
        if t in inside:
            assert probs[t] > 0.0
        else:
            assert probs[t] == 0.0
    # Within the subset the probabilities follow the full head's logits.
    sub = vocab.subset_ids
    logits = (np.ascontiguousarray(lm_head[sub]) @ hidden).astype(np.float64)
    want = np.exp(logits - logits.max())
    want /= want.sum()
    assert np.max(np.abs(probs[sub] - want)) < 1e-12


def test_stale_head_detection():
    rng = np.random.default_rng(7)
    lm_head = rng.normal(size=(16, 4)).astype(np.float32)
    vocab = build_frequency_vocab(np.arange(16, dtype=np.int64), 16, 0.5)
    head = ReducedHead(lm_head, vocab)
    head.check_fresh()
    lm_head[3, 2] += 1.0  # mutate the shared buffer after extraction
    with pytest.raises(StaleHeadError):
        head.check_fresh()
    hidden = np.zeros(4, dtype=np.float32)
    with pytest.raises(StaleHeadError):
        reduced_draft_probs(hidden, head)


def test_fraction_one_subset_is_whole_vocabulary():
    corpus = np.array([1, 1, 2], dtype=np.int64)
    vocab = build_frequency_vocab(corpus, 5, 1.0)
    assert sorted(vocab.subset_ids.tolist()) == list(range(5))
    assert vocab.reduction_factor == 1.0
