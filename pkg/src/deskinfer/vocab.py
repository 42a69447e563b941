"""Frequency-ranked vocabulary subsetting for cheap draft heads.

Language-model output heads spend most of their multiply-accumulates on
tokens that almost never occur. Ranking the vocabulary by corpus frequency
and keeping only the top fraction (plus special tokens) yields a reduced
draft head whose cost scales with the subset size, while verification over
the full vocabulary keeps generation output unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
import zlib

import numpy as np

from .container import ValidationError
from .model import softmax_f64


@dataclasses.dataclass
class FrequencyVocab:
    """Corpus statistics plus the chosen high-frequency subset.

    ``ranked_ids`` is a permutation of 0..vocab_size-1 in descending corpus
    count (ties toward the lower id). ``subset_ids`` lists the retained ids:
    the top ``ceil(fraction * vocab_size)`` ranked ids followed by any
    special ids not already present. ``global_to_subset`` maps a token id to
    its row in the reduced head, or -1 if the token was pruned.
    """

    vocab_size: int
    fraction: float
    counts: np.ndarray
    ranked_ids: np.ndarray
    subset_ids: np.ndarray
    specials: tuple[int, ...]
    global_to_subset: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        mapping = np.full(self.vocab_size, -1, dtype=np.int64)
        mapping[self.subset_ids] = np.arange(self.subset_ids.size)
        self.global_to_subset = mapping

    @property
    def subset_size(self) -> int:
        return int(self.subset_ids.size)

    @property
    def reduction_factor(self) -> float:
        """How many times smaller the reduced head is than the full head."""
        return self.vocab_size / self.subset_size

    def validate(self) -> None:
        if sorted(self.ranked_ids.tolist()) != list(range(self.vocab_size)):
            raise ValidationError("ranked_ids is not a permutation of the vocabulary")
        if len(set(self.subset_ids.tolist())) != self.subset_size:
            raise ValidationError("subset_ids contains duplicates")
        for sp in self.specials:
            if sp not in self.subset_ids:
                raise ValidationError(f"special token {sp} missing from subset")
        back = self.subset_ids[self.global_to_subset[self.subset_ids]]
        if not np.array_equal(back, self.subset_ids):
            raise ValidationError("global/subset maps are not mutual inverses")


def build_frequency_vocab(
    corpus: np.ndarray,
    vocab_size: int,
    fraction: float,
    specials: tuple[int, ...] = (),
) -> FrequencyVocab:
    """Rank tokens by corpus count and keep the top ``fraction`` plus specials."""
    corpus = np.asarray(corpus, dtype=np.int64).reshape(-1)
    if corpus.size == 0:
        raise ValidationError("empty corpus")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    if corpus.min() < 0 or corpus.max() >= vocab_size:
        raise ValidationError("corpus token id out of range")
    for sp in specials:
        if not 0 <= sp < vocab_size:
            raise ValidationError(f"special id {sp} out of range")
    counts = np.bincount(corpus, minlength=vocab_size).astype(np.int64)
    # descending count; equal counts keep ascending id order
    ranked = np.lexsort((np.arange(vocab_size), -counts)).astype(np.int64)
    top_n = math.ceil(fraction * vocab_size)
    subset = list(ranked[:top_n])
    present = set(subset)
    for sp in sorted(set(specials)):
        if sp not in present:
            subset.append(sp)
            present.add(sp)
    vocab = FrequencyVocab(
        vocab_size=vocab_size,
        fraction=float(fraction),
        counts=counts,
        ranked_ids=ranked,
        subset_ids=np.asarray(subset, dtype=np.int64),
        specials=tuple(int(s) for s in specials),
    )
    vocab.validate()
    return vocab


def coverage(vocab: FrequencyVocab, corpus: np.ndarray) -> float:
    """Fraction of corpus token occurrences that fall inside the subset."""
    corpus = np.asarray(corpus, dtype=np.int64).reshape(-1)
    if corpus.size == 0:
        raise ValidationError("empty corpus")
    return float(np.mean(vocab.global_to_subset[corpus] >= 0))


def save_vocab(vocab: FrequencyVocab, path) -> None:
    """Serialize to JSON (sorted keys, newline-terminated) atomically."""
    payload = {
        "vocab_size": vocab.vocab_size,
        "fraction": vocab.fraction,
        "counts": vocab.counts.tolist(),
        "ranked_ids": vocab.ranked_ids.tolist(),
        "subset_ids": vocab.subset_ids.tolist(),
        "specials": list(vocab.specials),
    }
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".vocab-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_vocab(path) -> FrequencyVocab:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    vocab = FrequencyVocab(
        vocab_size=int(payload["vocab_size"]),
        fraction=float(payload["fraction"]),
        counts=np.asarray(payload["counts"], dtype=np.int64),
        ranked_ids=np.asarray(payload["ranked_ids"], dtype=np.int64),
        subset_ids=np.asarray(payload["subset_ids"], dtype=np.int64),
        specials=tuple(int(s) for s in payload["specials"]),
    )
    vocab.validate()
    return vocab


# --------------------------------------------------------------------------
# reduced output head


class StaleHeadError(RuntimeError):
    """The full head changed after the reduced head was extracted."""


class ReducedHead:
    """Rows of the full LM head restricted to the vocabulary subset.

    Row extraction is a plain gather, so each retained row is bit-identical
    to the full head's. A checksum of the source head detects staleness if
    the underlying weights are modified after extraction.
    """

    def __init__(self, lm_head: np.ndarray, vocab: FrequencyVocab):
        if lm_head.shape[0] != vocab.vocab_size:
            raise ValidationError(
                f"LM head rows {lm_head.shape[0]} != vocab size {vocab.vocab_size}"
            )
        self.vocab = vocab
        self.source = lm_head
        self.weight = np.ascontiguousarray(lm_head[vocab.subset_ids])
        self.checksum = zlib.crc32(np.ascontiguousarray(lm_head).tobytes())

    @property
    def hidden_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def macs_per_token(self) -> int:
        """Multiply-accumulates for one reduced-head logit computation."""
        return int(self.weight.shape[0] * self.weight.shape[1])

    @property
    def full_macs_per_token(self) -> int:
        return int(self.source.shape[0] * self.source.shape[1])

    def check_fresh(self) -> None:
        if zlib.crc32(np.ascontiguousarray(self.source).tobytes()) != self.checksum:
            raise StaleHeadError("full LM head changed since extraction")


def reduced_draft_probs(hidden: np.ndarray, head: ReducedHead) -> np.ndarray:
    """Draft distribution over the FULL vocabulary scale.

    Softmax is taken over the subset logits only; pruned tokens get exactly
    zero probability. ``hidden`` is a single (d,) row; returns float64 (|V|,).
    """
    head.check_fresh()
    hidden = np.asarray(hidden, dtype=np.float32).reshape(-1)
    if hidden.shape[0] != head.hidden_dim:
        raise ValidationError(
            f"hidden dim {hidden.shape[0]} != head dim {head.hidden_dim}"
        )
    subset_logits = head.weight @ hidden
    subset_probs = softmax_f64(subset_logits.astype(np.float64))
    full = np.zeros(head.vocab.vocab_size, dtype=np.float64)
    full[head.vocab.subset_ids] = subset_probs
    return full
