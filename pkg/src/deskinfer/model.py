"""Desk-scale decoder-only transformer substrate.

A deliberately small GQA transformer implemented in numpy: enough model to
exercise block-sparse attention, speculative decoding, quantization, and the
multi-token-prediction head against brute-force oracles, while staying fast
on a CPU.

Numeric conventions: parameters and matmuls are float32; softmax
normalizers, log-sum-exp, and attention-weighted sums are accumulated in
float64 before casting back, so results are stable enough to compare against
float64 oracles at tight tolerances.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .container import QuantizedTensor, ValidationError, load_tensors, save_tensors


class NumericError(ValueError):
    """Raised when non-finite values reach a numeric kernel."""


# --------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class ModelConfig:
    """Architecture hyperparameters; hidden_dim must equal n_q_heads*head_dim."""

    hidden_dim: int = 64
    n_layers: int = 4
    n_q_heads: int = 8
    n_kv_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 256
    max_seq_len: int = 32768
    rope_base: float = 10000.0
    ffn_dim: int = 256
    tied_lm_head: bool = True

    def __post_init__(self) -> None:
        if self.hidden_dim != self.n_q_heads * self.head_dim:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} != n_q_heads*head_dim "
                f"{self.n_q_heads * self.head_dim}"
            )
        if self.n_q_heads % self.n_kv_heads:
            raise ValidationError(
                f"n_q_heads {self.n_q_heads} not divisible by n_kv_heads {self.n_kv_heads}"
            )
        if self.head_dim % 2:
            raise ValidationError("head_dim must be even for rotary embedding")
        for field in ("hidden_dim", "n_layers", "n_q_heads", "n_kv_heads",
                      "head_dim", "vocab_size", "max_seq_len", "ffn_dim"):
            if getattr(self, field) <= 0:
                raise ValidationError(f"{field} must be positive")

    @property
    def group_size(self) -> int:
        """Query heads per KV head."""
        return self.n_q_heads // self.n_kv_heads


def layer_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes for one transformer layer (weights act as x @ W)."""
    d, hd = cfg.hidden_dim, cfg.head_dim
    return {
        "attn_norm.weight": (d,),
        "attn.wq": (d, cfg.n_q_heads * hd),
        "attn.wk": (d, cfg.n_kv_heads * hd),
        "attn.wv": (d, cfg.n_kv_heads * hd),
        "attn.wo": (cfg.n_q_heads * hd, d),
        "mlp_norm.weight": (d,),
        "mlp.w_gate": (d, cfg.ffn_dim),
        "mlp.w_up": (d, cfg.ffn_dim),
        "mlp.w_down": (cfg.ffn_dim, d),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """All main-model parameter shapes keyed by container tensor name."""
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (cfg.vocab_size, cfg.hidden_dim),
        "final_norm.weight": (cfg.hidden_dim,),
    }
    for i in range(cfg.n_layers):
        for name, shape in layer_param_shapes(cfg).items():
            shapes[f"layers.{i}.{name}"] = shape
    if not cfg.tied_lm_head:
        shapes["lm_head"] = (cfg.vocab_size, cfg.hidden_dim)
    return shapes


@dataclasses.dataclass
class ModelBundle:
    """A config plus its named parameter tensors (float32).

    ``params`` may additionally hold ``mtp.*`` tensors for an attached
    multi-token-prediction head; those share the embedding and output head
    with the main model by identity (they are the same arrays).
    """

    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def lm_head(self) -> np.ndarray:
        """(vocab, d) output projection; the embedding itself when tied."""
        if self.config.tied_lm_head:
            return self.params["embedding"]
        return self.params["lm_head"]

    def validate(self) -> None:
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ValidationError(f"missing tensor {name!r}")
            got = self.params[name].shape
            if tuple(got) != shape:
                raise ValidationError(f"{name}: shape {got} != expected {shape}")


def random_bundle(cfg: ModelConfig, seed: int = 0, scale: float = 0.02) -> ModelBundle:
    """Seeded random initialization (normals scaled, norm gains at one)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return ModelBundle(cfg, params)


# --------------------------------------------------------------------------
# numeric primitives


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalization with a learned gain, no re-centering."""
    x64 = x.astype(np.float64)
    denom = np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return ((x64 / denom) * weight.astype(np.float64)).astype(x.dtype)


def rope_angles(cfg: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotary cos/sin tables for absolute positions; shape (n, head_dim)."""
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-np.arange(0, half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    return cos.astype(np.float32), sin.astype(np.float32)


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate per-position query/key heads; x is (n, n_heads, head_dim)."""
    return x * cos[:, None, :] + rotate_half(x) * sin[:, None, :]


def logsumexp(scores: np.ndarray) -> float:
    """log(sum(exp(scores))) with max-subtraction, accumulated in float64."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("logsumexp of an empty score vector")
    m = np.max(s)
    if np.isneginf(m):
        return float("-inf")
    if not np.isfinite(m):
        raise NumericError("non-finite scores in logsumexp")
    return float(m + np.log(np.sum(np.exp(s - m))))


def softmax_f64(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with float64 normalizer; -inf entries get exactly zero mass."""
    s = np.asarray(scores, dtype=np.float64)
    m = np.max(s, axis=axis, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(s - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _masked_grouped_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    allowed: np.ndarray,
    n_q_heads: int,
    n_kv_heads: int,
) -> np.ndarray:
    """Grouped-query attention with an explicit (n, m) visibility mask."""
    if not (np.isfinite(q).all() and np.isfinite(k).all() and np.isfinite(v).all()):
        raise NumericError("non-finite values in attention inputs")
    n, m = q.shape[0], k.shape[0]
    if q.shape[1] % n_q_heads or k.shape[1] % n_kv_heads:
        raise ValidationError("feature dims not divisible by head counts")
    head_dim = q.shape[1] // n_q_heads
    if k.shape[1] // n_kv_heads != head_dim or v.shape != k.shape:
        raise ValidationError("query/key head dims disagree")
    if not allowed.any(axis=1).all():
        raise ValidationError("every query must see at least one key")
    group = n_q_heads // n_kv_heads
    q3 = q.reshape(n, n_q_heads, head_dim)
    k3 = k.reshape(m, n_kv_heads, head_dim)
    v3 = v.reshape(m, n_kv_heads, head_dim)
    out = np.empty((n, n_q_heads, head_dim), dtype=np.float32)
    scale = 1.0 / np.sqrt(head_dim)
    for h in range(n_q_heads):
        g = h // group
        scores = (q3[:, h, :] @ k3[:, g, :].T) * scale  # (n, m) float32
        s64 = scores.astype(np.float64)
        s64[~allowed] = -np.inf
        probs = softmax_f64(s64, axis=-1)
        out[:, h, :] = (probs @ v3[:, g, :].astype(np.float64)).astype(np.float32)
    return out.reshape(n, n_q_heads * head_dim)


def dense_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    *,
    n_q_heads: int,
    n_kv_heads: int,
    causal_offset: int = 0,
) -> np.ndarray:
    """Causal grouped-query attention.

    ``q`` is (n, n_q_heads*head_dim), ``k``/``v`` are (m, n_kv_heads*head_dim),
    all already rotated. Query row i (absolute position ``causal_offset + i``)
    attends key rows 0..causal_offset+i. Query head h reads KV head
    ``h // (n_q_heads//n_kv_heads)``. Returns (n, n_q_heads*head_dim).
    """
    n, m = q.shape[0], k.shape[0]
    if causal_offset < 0 or causal_offset + n > m:
        raise ValidationError(
            f"causal_offset {causal_offset} with {n} queries exceeds {m} keys"
        )
    allowed = (
        np.arange(m)[None, :] <= (causal_offset + np.arange(n))[:, None]
    )
    return _masked_grouped_attention(q, k, v, allowed, n_q_heads, n_kv_heads)


def sliding_window_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    *,
    n_q_heads: int,
    n_kv_heads: int,
    window: int,
    causal_offset: int = 0,
    ancestor_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Causal attention restricted to the trailing ``window`` positions.

    Query row i sees key rows j with ``pos_i - window < j <= pos_i`` where
    ``pos_i = causal_offset + i`` (window=1 means self only). An optional
    boolean ``ancestor_mask`` of shape (n, m) re-admits rows outside the
    window — used by tree-structured drafts, where a node must always see
    its ancestors. Rows after ``pos_i`` stay invisible regardless.
    """
    if window < 1:
        raise ValidationError("window must be at least 1")
    n, m = q.shape[0], k.shape[0]
    if causal_offset < 0 or causal_offset + n > m:
        raise ValidationError(
            f"causal_offset {causal_offset} with {n} queries exceeds {m} keys"
        )
    pos = (causal_offset + np.arange(n))[:, None]
    key = np.arange(m)[None, :]
    allowed = (key <= pos) & (key > pos - window)
    if ancestor_mask is not None:
        if ancestor_mask.shape != (n, m):
            raise ValidationError(
                f"ancestor mask shape {ancestor_mask.shape} != ({n}, {m})"
            )
        allowed |= ancestor_mask & (key <= pos)
    return _masked_grouped_attention(q, k, v, allowed, n_q_heads, n_kv_heads)


# --------------------------------------------------------------------------
# KV cache


class LayerCache:
    """Per-layer growable store of rotated keys and values.

    Shapes are (length, n_kv_heads, head_dim). ``truncate`` supports the
    rewind used by speculative decoding. Subclasses may override
    ``notify_append``/``notify_truncate`` to maintain derived structures
    (block partitions, pooled kernels).
    """

    def __init__(self, n_kv_heads: int, head_dim: int):
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self._keys = np.empty((0, n_kv_heads, head_dim), dtype=np.float32)
        self._values = np.empty((0, n_kv_heads, head_dim), dtype=np.float32)
        self.length = 0

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self.length]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self.length]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[0]
        need = self.length + n
        if need > self._keys.shape[0]:
            cap = max(need, 2 * self._keys.shape[0], 64)
            grown_k = np.empty((cap,) + self._keys.shape[1:], dtype=np.float32)
            grown_v = np.empty_like(grown_k)
            grown_k[: self.length] = self._keys[: self.length]
            grown_v[: self.length] = self._values[: self.length]
            self._keys, self._values = grown_k, grown_v
        self._keys[self.length : need] = k
        self._values[self.length : need] = v
        old = self.length
        self.length = need
        self.notify_append(old)

    def truncate(self, new_length: int) -> None:
        if not 0 <= new_length <= self.length:
            raise ValidationError(
                f"cannot truncate cache of length {self.length} to {new_length}"
            )
        old = self.length
        self.length = new_length
        if new_length != old:
            self.notify_truncate(old)

    def notify_append(self, old_length: int) -> None:  # pragma: no cover - hook
        pass

    def notify_truncate(self, old_length: int) -> None:  # pragma: no cover - hook
        pass


class KVCache:
    """One LayerCache per transformer layer plus the running position."""

    def __init__(self, cfg: ModelConfig, layer_factory=None):
        factory = layer_factory or (lambda: LayerCache(cfg.n_kv_heads, cfg.head_dim))
        self.layers = [factory() for _ in range(cfg.n_layers)]
        self.config = cfg

    @property
    def length(self) -> int:
        return self.layers[0].length if self.layers else 0

    def truncate(self, new_length: int) -> None:
        for layer in self.layers:
            layer.truncate(new_length)


# --------------------------------------------------------------------------
# forward pass


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


@dataclasses.dataclass
class ForwardResult:
    logits: np.ndarray   # (n, vocab) float32
    hiddens: np.ndarray  # (n, d) float32, last layer output before final norm


def forward(
    bundle: ModelBundle,
    tokens: np.ndarray,
    cache: Optional[KVCache] = None,
    *,
    backend: str = "dense",
    sparse_config=None,
) -> ForwardResult:
    """Run ``tokens`` through the model, appending to ``cache`` if given.

    ``backend`` selects the attention path: "dense" (every key) or "sparse"
    (two-stage block selection; requires a cache built with blockized layer
    caches — see :mod:`deskinfer.sparse`).
    """
    cfg = bundle.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise ValidationError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValidationError("token id out of range")
    start = cache.length if cache is not None else 0
    n = tokens.size
    if start + n > cfg.max_seq_len:
        raise ValidationError(
            f"sequence length {start + n} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if backend not in ("dense", "sparse"):
        raise ValidationError(f"unknown attention backend {backend!r}")
    if backend == "sparse":
        from . import sparse as _sparse  # runtime dependency only when used

        if sparse_config is None:
            sparse_config = _sparse.SparseAttentionConfig()

    positions = np.arange(start, start + n)
    cos, sin = rope_angles(cfg, positions)
    p = bundle.params
    x = p["embedding"][tokens].astype(np.float32)

    for i in range(cfg.n_layers):
        lp = f"layers.{i}."
        h = rms_norm(x, p[lp + "attn_norm.weight"])
        q = (h @ p[lp + "attn.wq"]).reshape(n, cfg.n_q_heads, cfg.head_dim)
        k = (h @ p[lp + "attn.wk"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        v = (h @ p[lp + "attn.wv"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

        if cache is not None:
            layer = cache.layers[i]
            layer.append(k, v)
            keys, values = layer.keys, layer.values
        else:
            layer = None
            keys, values = k, v

        if backend == "sparse" and layer is not None:
            attn = _sparse.two_stage_attention(q, layer, sparse_config, start)
            attn = attn.reshape(n, cfg.n_q_heads * cfg.head_dim)
        else:
            attn = dense_attention(
                q.reshape(n, -1),
                keys.reshape(keys.shape[0], -1),
                values.reshape(values.shape[0], -1),
                n_q_heads=cfg.n_q_heads,
                n_kv_heads=cfg.n_kv_heads,
                causal_offset=start if cache is not None else 0,
            )
        x = x + attn @ p[lp + "attn.wo"]

        h = rms_norm(x, p[lp + "mlp_norm.weight"])
        gated = _silu(h @ p[lp + "mlp.w_gate"]) * (h @ p[lp + "mlp.w_up"])
        x = x + gated @ p[lp + "mlp.w_down"]

    hiddens = x
    logits = output_head(bundle, hiddens)
    return ForwardResult(logits=logits, hiddens=hiddens)


def output_head(bundle: ModelBundle, hiddens: np.ndarray) -> np.ndarray:
    """Shared output head: final RMS norm followed by the LM projection."""
    normed = rms_norm(hiddens, bundle.params["final_norm.weight"])
    return normed @ bundle.lm_head.T


# --------------------------------------------------------------------------
# container round trip


def save_model(bundle: ModelBundle, path) -> None:
    bundle.validate()
    meta = {"__config__": dataclasses.asdict(bundle.config)}
    save_tensors(path, dict(bundle.params), meta=meta)


def load_model(path) -> ModelBundle:
    """Load a bundle; 4-bit tensors are dequantized to float32 on load.

    Quantized entries are stored output-major (rows = output features, with
    groups tiling the input dimension), so they are transposed back into
    the runtime input-major layout here.
    """
    tensors, meta = load_tensors(path)
    if "__config__" not in meta:
        raise ValidationError("container carries no model config")
    cfg = ModelConfig(**meta["__config__"])
    params: dict[str, np.ndarray] = {}
    for name, tensor in tensors.items():
        if isinstance(tensor, QuantizedTensor):
            from . import quantize as _quantize

            params[name] = np.ascontiguousarray(_quantize.dequantize(tensor).T)
        else:
            params[name] = tensor
    if not cfg.tied_lm_head and "lm_head" not in params:
        raise ValidationError("missing tensor 'lm_head' (model is not tied)")
    bundle = ModelBundle(cfg, params)
    bundle.validate()
    return bundle
