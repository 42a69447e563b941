"""Weight-only group quantization with second-order error compensation.

Each linear layer's weights are rounded to a per-group 4-bit grid, column
by column, with the rounding error of every column folded back into the
not-yet-quantized columns through the Cholesky factor of the inverse
calibration Gram matrix — the compensated rounding never does worse than
naive round-to-nearest on the calibration objective ``||XW - XW_q||^2``.

The prefix-aware variant builds that Gram matrix only from token positions
at or beyond a threshold ``s``: the first few positions of a sequence carry
massively larger activations whose outlier directions otherwise dominate
the calibration statistics and mis-shape the compensation everywhere else.

Weights are handled here in (d_out, d_in) orientation — one output feature
per row, groups tiling the input dimension — matching the container's q4g
layout. The runtime model stores the transpose; callers convert.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .container import QuantizedTensor, ValidationError
from .model import (
    ModelBundle,
    NumericError,
    _silu,
    apply_rope,
    dense_attention,
    forward,
    rms_norm,
    rope_angles,
)

DEFAULT_GROUP_SIZE = 128
DEFAULT_PREFIX_S = 4

#: per-layer linear parameters that get quantized (inputs captured for each)
BLOCK_LINEARS = (
    "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "mlp.w_gate", "mlp.w_up", "mlp.w_down",
)


# --------------------------------------------------------------------------
# calibration capture


@dataclasses.dataclass
class CalibrationSet:
    """Per-linear activation rows plus each row's position in its sequence.

    ``activations[name]`` is (n, d_in) float32 — the exact inputs the named
    linear saw during calibration forward passes. All linears share the
    same ``positions`` array because rows are captured token-aligned.
    """

    activations: dict[str, np.ndarray]
    positions: np.ndarray

    def validate(self) -> None:
        n = self.positions.size
        if n == 0:
            raise ValidationError("empty calibration set")
        if (self.positions < 0).any():
            raise ValidationError("positions must be non-negative")
        for name, x in self.activations.items():
            if x.ndim != 2 or x.shape[0] != n:
                raise ValidationError(
                    f"{name}: activation rows {x.shape} disagree with "
                    f"{n} recorded positions"
                )


def collect_calibration(bundle: ModelBundle, sequences) -> CalibrationSet:
    """Run calibration sequences and capture every block linear's inputs.

    Mirrors the forward pass exactly (the captured tensors replay to the
    same outputs), recording one row per token per sequence.
    """
    cfg = bundle.config
    seqs = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sequences]
    if not seqs or any(s.size == 0 for s in seqs):
        raise ValidationError("calibration needs at least one non-empty sequence")
    captured: dict[str, list[np.ndarray]] = {
        f"layers.{i}.{linear}": [] for i in range(cfg.n_layers)
        for linear in BLOCK_LINEARS
    }
    positions: list[np.ndarray] = []
    p = bundle.params
    for tokens in seqs:
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValidationError("token id out of range")
        n = tokens.size
        positions.append(np.arange(n))
        cos, sin = rope_angles(cfg, np.arange(n))
        x = p["embedding"][tokens].astype(np.float32)
        for i in range(cfg.n_layers):
            lp = f"layers.{i}."
            h = rms_norm(x, p[lp + "attn_norm.weight"])
            for linear in ("attn.wq", "attn.wk", "attn.wv"):
                captured[lp + linear].append(h)
            q = (h @ p[lp + "attn.wq"]).reshape(n, cfg.n_q_heads, cfg.head_dim)
            k = (h @ p[lp + "attn.wk"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
            v = (h @ p[lp + "attn.wv"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
            attn = dense_attention(
                q.reshape(n, -1), k.reshape(n, -1), v.reshape(n, -1),
                n_q_heads=cfg.n_q_heads, n_kv_heads=cfg.n_kv_heads,
            )
            captured[lp + "attn.wo"].append(attn)
            x = x + attn @ p[lp + "attn.wo"]
            h = rms_norm(x, p[lp + "mlp_norm.weight"])
            captured[lp + "mlp.w_gate"].append(h)
            captured[lp + "mlp.w_up"].append(h)
            gated = _silu(h @ p[lp + "mlp.w_gate"]) * (h @ p[lp + "mlp.w_up"])
            captured[lp + "mlp.w_down"].append(gated)
            x = x + gated @ p[lp + "mlp.w_down"]
    out = CalibrationSet(
        activations={k: np.concatenate(v, axis=0) for k, v in captured.items()},
        positions=np.concatenate(positions),
    )
    out.validate()
    return out


# --------------------------------------------------------------------------
# Gram matrices


@dataclasses.dataclass
class HessianEstimate:
    """Calibration Gram matrix ``X^T X`` (float64) plus its provenance."""

    matrix: np.ndarray
    mode: str            # "full" | "prefix"
    prefix_s: int = 0
    n_rows: int = 0

    @property
    def damping(self) -> float:
        """Diagonal shift applied before factorization: 1% of the mean diagonal."""
        return 0.01 * float(np.mean(np.diag(self.matrix)))

    def damped(self) -> np.ndarray:
        d = self.matrix.shape[0]
        return self.matrix + self.damping * np.eye(d)

    def validate(self) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("Gram matrix must be square")
        if np.abs(m - m.T).max() > 1e-6:
            raise ValidationError("Gram matrix is not symmetric")
        if self.mode not in ("full", "prefix"):
            raise ValidationError(f"unknown mode {self.mode!r}")


def hessian(x: np.ndarray) -> HessianEstimate:
    """Exact Gram matrix of the calibration rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("calibration matrix must be (n >= 1, d_in)")
    return HessianEstimate(matrix=x.T @ x, mode="full", n_rows=x.shape[0])


def prefix_hessian(x: np.ndarray, positions: np.ndarray, s: int) -> HessianEstimate:
    """Gram matrix over only the rows with position >= ``s``.

    Early positions carry outsized activations; excluding them keeps the
    calibration statistics representative of steady-state tokens. ``s=0``
    keeps every row and is identical to :func:`hessian`.
    """
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != positions.size:
        raise ValidationError("rows and positions must align")
    if s < 0:
        raise ValidationError("position threshold must be non-negative")
    if s == 0:
        return hessian(x)
    keep = positions >= s
    if not keep.any():
        raise ValidationError(
            f"no calibration rows at position >= {s}; lower the threshold "
            f"or calibrate on longer sequences"
        )
    est = hessian(x[keep])
    return HessianEstimate(matrix=est.matrix, mode="prefix", prefix_s=s,
                           n_rows=est.n_rows)


# --------------------------------------------------------------------------
# grids and rounding


def _group_grid(
    w: np.ndarray, bits: int, symmetric: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row scale and zero-point for one group of columns.

    Asymmetric grids span [min, max] per row; symmetric grids center the
    grid on zero. Constant rows get a grid that represents their single
    value exactly.
    """
    levels = (1 << bits) - 1
    lo = w.min(axis=1)
    hi = w.max(axis=1)
    if symmetric:
        half = levels // 2
        scale = np.maximum(np.abs(lo), np.abs(hi)) / max(half, 1)
        zero = np.full(w.shape[0], float(levels - half))
        flat = scale <= 0
        scale[flat] = 1.0
        return scale, zero
    scale = (hi - lo) / levels
    with np.errstate(divide="ignore", invalid="ignore"):
        zero = np.clip(np.round(-lo / scale), 0, levels)
    flat = scale <= 0
    # constant rows: value 0 -> unit scale at code 0; value c > 0 -> scale c
    # at code 1; value c < 0 -> scale -c with zero-point 1 (code 0 gives c)
    if flat.any():
        c = lo[flat]
        scale[flat] = np.where(c == 0, 1.0, np.abs(c))
        zero[flat] = np.where(c < 0, 1.0, 0.0)
    return scale, zero


def _round_to_grid(w: np.ndarray, scale: np.ndarray, zero: np.ndarray,
                   bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    return np.clip(np.round(w / scale[:, None] + zero[:, None]), 0, levels)


def rtn_quantize(
    w: np.ndarray,
    group_size: int = DEFAULT_GROUP_SIZE,
    *,
    bits: int = 4,
    symmetric: bool = False,
) -> QuantizedTensor:
    """Plain round-to-nearest onto per-group grids (no compensation)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError("weights must be 2-D (d_out, d_in)")
    if group_size < 1:
        raise ValidationError("group size must be positive")
    rows, cols = w.shape
    n_groups = -(-cols // group_size)
    codes = np.zeros((rows, cols), dtype=np.uint8)
    scales = np.zeros((rows, n_groups), dtype=np.float32)
    zeros = np.zeros((rows, n_groups), dtype=np.float32)
    for g in range(n_groups):
        g0, g1 = g * group_size, min((g + 1) * group_size, cols)
        scale, zero = _group_grid(w[:, g0:g1], bits, symmetric)
        scales[:, g] = scale
        zeros[:, g] = zero
        codes[:, g0:g1] = _round_to_grid(
            w[:, g0:g1], scales[:, g].astype(np.float64),
            zeros[:, g].astype(np.float64), bits,
        ).astype(np.uint8)
    qt = QuantizedTensor(codes=codes, scales=scales, zeros=zeros,
                         group_size=group_size, bits=bits)
    qt.validate()
    return qt


def gptq_quantize(
    w: np.ndarray,
    h: HessianEstimate | np.ndarray,
    group_size: int = DEFAULT_GROUP_SIZE,
    *,
    bits: int = 4,
    symmetric: bool = False,
) -> QuantizedTensor:
    """Column-by-column rounding with Cholesky-based error compensation.

    Columns are processed left to right; each column is rounded onto its
    group's grid and its rounding error, weighted by the upper Cholesky
    factor of the damped inverse Gram matrix, is subtracted from the
    remaining columns so later roundings can cancel it. Group grids are
    recomputed from the compensated weights when the column loop enters
    each group. With an identity Gram matrix no error propagates and the
    result coincides with plain round-to-nearest.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError("weights must be 2-D (d_out, d_in)")
    if group_size < 1:
        raise ValidationError("group size must be positive")
    est = h if isinstance(h, HessianEstimate) else HessianEstimate(
        matrix=np.asarray(h, dtype=np.float64), mode="full"
    )
    rows, cols = w.shape
    if est.matrix.shape != (cols, cols):
        raise ValidationError(
            f"Gram matrix {est.matrix.shape} does not match d_in={cols}"
        )
    try:
        damped = est.damped()
        if not np.isfinite(damped).all():
            raise np.linalg.LinAlgError("non-finite Gram matrix")
        hinv = np.linalg.inv(damped)
        hinv = (hinv + hinv.T) / 2.0
        upper = np.linalg.cholesky(hinv).T  # hinv = upper^T upper
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Gram matrix is not positive definite after damping: {exc}"
        ) from exc

    work = w.copy()
    n_groups = -(-cols // group_size)
    codes = np.zeros((rows, cols), dtype=np.uint8)
    scales = np.zeros((rows, n_groups), dtype=np.float32)
    zeros = np.zeros((rows, n_groups), dtype=np.float32)
    scale64 = np.zeros(rows)
    zero64 = np.zeros(rows)
    for j in range(cols):
        g = j // group_size
        if j % group_size == 0:
            g1 = min((g + 1) * group_size, cols)
            s, z = _group_grid(work[:, j:g1], bits, symmetric)
            scales[:, g] = s
            zeros[:, g] = z
            scale64 = scales[:, g].astype(np.float64)
            zero64 = zeros[:, g].astype(np.float64)
        col = work[:, j]
        code = np.clip(np.round(col / scale64 + zero64), 0, (1 << bits) - 1)
        codes[:, j] = code.astype(np.uint8)
        deq = scale64 * (code - zero64)
        err = (col - deq) / upper[j, j]
        if j + 1 < cols:
            work[:, j + 1 :] -= np.outer(err, upper[j, j + 1 :])
    qt = QuantizedTensor(codes=codes, scales=scales, zeros=zeros,
                         group_size=group_size, mode=est.mode,
                         prefix_s=est.prefix_s, bits=bits)
    qt.validate()
    return qt


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct the float32 weight matrix: scale * (code - zero) per group."""
    qt.validate()
    rows, cols = qt.codes.shape
    out = np.empty((rows, cols), dtype=np.float32)
    for g in range(qt.n_groups):
        g0, g1 = g * qt.group_size, min((g + 1) * qt.group_size, cols)
        out[:, g0:g1] = (
            qt.scales[:, g : g + 1].astype(np.float64)
            * (qt.codes[:, g0:g1].astype(np.float64) - qt.zeros[:, g : g + 1])
        ).astype(np.float32)
    return out


# --------------------------------------------------------------------------
# whole-model quantization and evaluation


def quantize_bundle(
    bundle: ModelBundle,
    calibration: CalibrationSet,
    *,
    group_size: int = DEFAULT_GROUP_SIZE,
    bits: int = 4,
    prefix_s: int = 0,
    symmetric: bool = False,
) -> dict[str, QuantizedTensor]:
    """Quantize every block linear; returns container-ready tensors.

    Results are keyed by parameter name and stored output-major (the
    transpose of the runtime layout). ``prefix_s=0`` calibrates on all
    positions; a positive threshold switches every layer to the
    prefix-restricted Gram matrix.
    """
    calibration.validate()
    out: dict[str, QuantizedTensor] = {}
    for name in sorted(calibration.activations):
        if name not in bundle.params:
            raise ValidationError(f"calibration names unknown tensor {name!r}")
        x = calibration.activations[name]
        est = prefix_hessian(x, calibration.positions, prefix_s)
        out[name] = gptq_quantize(
            bundle.params[name].T, est, group_size, bits=bits, symmetric=symmetric
        )
    return out


def apply_quantized(
    bundle: ModelBundle, quantized: dict[str, QuantizedTensor]
) -> ModelBundle:
    """A bundle whose quantized linears are replaced by their reconstructions."""
    params = dict(bundle.params)
    for name, qt in quantized.items():
        if name not in params:
            raise ValidationError(f"quantized tensor {name!r} unknown to the model")
        arr = np.ascontiguousarray(dequantize(qt).T)
        if arr.shape != params[name].shape:
            raise ValidationError(
                f"{name}: dequantized shape {arr.shape} != {params[name].shape}"
            )
        params[name] = arr
    return ModelBundle(bundle.config, params)


def proxy_loss(
    x: np.ndarray,
    w: np.ndarray,
    w_q: np.ndarray,
    *,
    positions: Optional[np.ndarray] = None,
    min_position: int = 0,
) -> float:
    """Calibration objective ``||XW - XW_q||^2`` (weights output-major).

    With ``positions``/``min_position`` the comparison is restricted to
    rows at or beyond the threshold — the steady-state tokens a
    prefix-restricted quantization is supposed to serve well.
    """
    x = np.asarray(x, dtype=np.float64)
    if positions is not None:
        keep = np.asarray(positions).reshape(-1) >= min_position
        if not keep.any():
            raise ValidationError("no rows at or beyond the position threshold")
        x = x[keep]
    diff = x @ (np.asarray(w, dtype=np.float64) - np.asarray(w_q, dtype=np.float64)).T
    return float(np.sum(diff * diff))


@dataclasses.dataclass
class QuantEvalReport:
    per_layer_proxy: dict[str, float]
    max_logit_drift: float
    mean_logit_drift: float


def quant_eval(
    bundle: ModelBundle,
    quantized: dict[str, QuantizedTensor],
    calibration: CalibrationSet,
    eval_sequences,
) -> QuantEvalReport:
    """Per-layer proxy losses plus end-to-end logit drift on eval sequences."""
    calibration.validate()
    per_layer: dict[str, float] = {}
    for name, qt in sorted(quantized.items()):
        x = calibration.activations.get(name)
        if x is None:
            raise ValidationError(f"no calibration rows for {name!r}")
        per_layer[name] = proxy_loss(x, bundle.params[name].T, dequantize(qt))
    quant_bundle = apply_quantized(bundle, quantized)
    worst, total, count = 0.0, 0.0, 0
    for seq in eval_sequences:
        ref = forward(bundle, seq).logits.astype(np.float64)
        got = forward(quant_bundle, seq).logits.astype(np.float64)
        drift = np.abs(ref - got)
        worst = max(worst, float(drift.max()))
        total += float(drift.sum())
        count += drift.size
    if count == 0:
        raise ValidationError("no evaluation sequences")
    return QuantEvalReport(per_layer_proxy=per_layer, max_logit_drift=worst,
                           mean_logit_drift=total / count)
