"""Desk-scale transformer inference toolkit.

NumPy-only reference implementations of four efficiency mechanisms for
decoding on small hardware, each validated against a dense or brute-force
oracle:

- ``sparse``: two-stage block-sparse attention — mean-pooled kernel scores
  pick top-k KV blocks per query group, with forced initial/local blocks
  and exact dense degradation on short sequences.
- ``specdec``: speculative decoding (chain and tree drafts) with lossless
  verification — greedy streams are token-identical to plain decoding, and
  sampled acceptance preserves the target distribution exactly.
- ``vocab`` + ``mtp``: a frequency-ranked reduced draft vocabulary and a
  two-ahead draft head that together cut per-draft output-projection cost.
- ``quantize``: 4-bit grouped weight quantization with second-order error
  compensation, calibrated on all rows or only positions past a prefix.

``model`` provides the GQA + RoPE + RMSNorm substrate and the ``.cpm4``
tensor container; ``bench`` the cost-accounting and needle-retrieval
harnesses; ``cli`` the command-line entry point.
"""

from . import bench, cli, container, corpus, model, mtp, quantize, sparse, specdec, vocab

__version__ = "0.1.0"

__all__ = [
    "bench",
    "cli",
    "container",
    "corpus",
    "model",
    "mtp",
    "quantize",
    "sparse",
    "specdec",
    "vocab",
    "__version__",
]
