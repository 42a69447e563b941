"""Byte-level tokenization and synthetic corpora.

The default tokenizer is byte-level: ids 0..255 are raw byte values, so any
file is a valid corpus, followed by three specials (BOS, EOS, PAD). Synthetic
streams with a power-law (Zipf-like) unigram profile are provided for
frequency-ranked vocabulary experiments.
"""

from __future__ import annotations

import numpy as np

N_BYTES = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
SPECIAL_IDS = (BOS_ID, EOS_ID, PAD_ID)
BYTE_VOCAB_SIZE = N_BYTES + len(SPECIAL_IDS)  # 259


def encode_bytes(data: bytes, *, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
    """Bytes -> int64 token ids (optionally framed by BOS/EOS)."""
    ids = list(data)
    if add_bos:
        ids.insert(0, BOS_ID)
    if add_eos:
        ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int64)


def decode_bytes(ids: np.ndarray) -> bytes:
    """Token ids -> bytes; special ids are dropped."""
    return bytes(int(t) for t in np.asarray(ids).reshape(-1) if 0 <= int(t) < N_BYTES)


def zipf_probs(vocab_size: int, exponent: float = 1.1) -> np.ndarray:
    """Normalized power-law unigram distribution over ranks 1..vocab_size."""
    if vocab_size <= 0:
        raise ValueError("vocab_size must be positive")
    weights = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


def zipf_stream(
    vocab_size: int,
    n_tokens: int,
    *,
    exponent: float = 1.1,
    seed: int = 0,
    shuffle_ids: bool = True,
) -> np.ndarray:
    """Sample a token stream whose unigram profile follows a power law.

    With ``shuffle_ids`` the rank->id assignment is a seeded permutation, so
    frequent tokens are not simply the low ids (which would mask indexing
    bugs in frequency-ranked vocabularies).
    """
    rng = np.random.default_rng(seed)
    probs = zipf_probs(vocab_size, exponent)
    ranks = rng.choice(vocab_size, size=n_tokens, p=probs)
    if shuffle_ids:
        perm = rng.permutation(vocab_size)
        return perm[ranks].astype(np.int64)
    return ranks.astype(np.int64)
