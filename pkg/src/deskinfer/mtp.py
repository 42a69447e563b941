"""Multi-token prediction head, losses, gradients, and toy training.

The head predicts the token *two* steps ahead: for position i it concatenates
the RMS-normalized main-model hidden state h_i with the RMS-normalized
embedding of the next token x_{i+1}, projects 2d -> d, and runs one extra
transformer layer whose output (through the shared output head) is scored
against x_{i+2}. The embedding and output head are shared with the main
model *by identity* — the head holds references, not copies — which is what
lets the trained head double as a cheap autoregressive drafter for
speculative decoding.

Training support is a hand-written float64 forward/backward over the full
computation (main model + head), validated against central finite
differences. Inference-path helpers (float32) mirror the same math for use
inside the generation loop.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np

from .container import ValidationError
from .model import (
    ModelBundle,
    ModelConfig,
    NumericError,
    dense_attention,
    layer_param_shapes,
    rms_norm,
    rope_angles,
    rotate_half,
    sliding_window_attention,
    softmax_f64,
)

MTP_PREFIX = "mtp."


def mtp_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        MTP_PREFIX + "h_norm.weight": (d,),
        MTP_PREFIX + "e_norm.weight": (d,),
        MTP_PREFIX + "combiner": (2 * d, d),
    }
    for name, shape in layer_param_shapes(cfg).items():
        shapes[MTP_PREFIX + "layer." + name] = shape
    return shapes


@dataclasses.dataclass
class MTPHead:
    """View over a bundle's ``mtp.*`` parameters.

    The embedding and output head are the bundle's own tensors (identity
    sharing): mutating the embedding through the main model changes this
    head's logits too.
    """

    bundle: ModelBundle

    @property
    def config(self) -> ModelConfig:
        return self.bundle.config

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.bundle.params

    @property
    def combiner(self) -> np.ndarray:
        return self.params[MTP_PREFIX + "combiner"]

    @property
    def embedding(self) -> np.ndarray:
        return self.params["embedding"]

    @property
    def lm_head(self) -> np.ndarray:
        return self.bundle.lm_head

    def validate(self) -> None:
        for name, shape in mtp_param_shapes(self.config).items():
            if name not in self.params:
                raise ValidationError(f"missing head tensor {name!r}")
            if tuple(self.params[name].shape) != shape:
                raise ValidationError(
                    f"{name}: shape {self.params[name].shape} != expected {shape}"
                )
        if self.combiner.shape[0] != 2 * self.config.hidden_dim:
            raise ValidationError("combiner input dimension must be 2d")
        if self.embedding is not self.params["embedding"]:
            raise ValidationError("embedding is not shared by identity")


def init_mtp_head(bundle: ModelBundle, seed: int = 0, scale: float = 0.02) -> MTPHead:
    """Attach freshly initialized head parameters to ``bundle`` and wrap them."""
    rng = np.random.default_rng(seed)
    for name, shape in mtp_param_shapes(bundle.config).items():
        if name.endswith("norm.weight"):
            bundle.params[name] = np.ones(shape, dtype=np.float32)
        else:
            bundle.params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    head = MTPHead(bundle)
    head.validate()
    return head


def has_mtp_head(bundle: ModelBundle) -> bool:
    return all(name in bundle.params for name in mtp_param_shapes(bundle.config))


# --------------------------------------------------------------------------
# inference-path forward (float32)


def combine_inputs(head: MTPHead, hiddens: np.ndarray, next_tokens: np.ndarray) -> np.ndarray:
    """Pre-transformer combination: concat of normalized inputs, projected to d."""
    cfg = head.config
    hiddens = np.asarray(hiddens, dtype=np.float32).reshape(-1, cfg.hidden_dim)
    next_tokens = np.asarray(next_tokens, dtype=np.int64).reshape(-1)
    if next_tokens.size != hiddens.shape[0]:
        raise ValidationError("hidden/token row count mismatch")
    if next_tokens.size and (next_tokens.min() < 0 or next_tokens.max() >= cfg.vocab_size):
        raise ValidationError("token id out of range")
    hn = rms_norm(hiddens, head.params[MTP_PREFIX + "h_norm.weight"])
    en = rms_norm(
        head.embedding[next_tokens].astype(np.float32),
        head.params[MTP_PREFIX + "e_norm.weight"],
    )
    return np.concatenate([hn, en], axis=-1) @ head.combiner


def mtp_hidden(
    head: MTPHead,
    hiddens: np.ndarray,
    next_tokens: np.ndarray,
    *,
    positions: Optional[np.ndarray] = None,
    window: Optional[int] = None,
    ancestor_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Head hidden states: combined inputs fed through the extra layer.

    Row i is the state that predicts the token two ahead of position i. The
    layer attends causally over the given rows; ``window`` restricts it to a
    trailing window (drafting mode) and ``ancestor_mask`` re-admits tree
    ancestors.
    """
    cfg = head.config
    u = combine_inputs(head, hiddens, next_tokens)
    n = u.shape[0]
    if positions is None:
        positions = np.arange(n)
    cos, sin = rope_angles(cfg, np.asarray(positions))
    p, pref = head.params, MTP_PREFIX + "layer."

    h = rms_norm(u, p[pref + "attn_norm.weight"])
    q = (h @ p[pref + "attn.wq"]).reshape(n, cfg.n_q_heads, cfg.head_dim)
    k = (h @ p[pref + "attn.wk"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
    v = (h @ p[pref + "attn.wv"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
    q = q * cos[:, None, :] + rotate_half(q) * sin[:, None, :]
    k = k * cos[:, None, :] + rotate_half(k) * sin[:, None, :]
    kw = {"n_q_heads": cfg.n_q_heads, "n_kv_heads": cfg.n_kv_heads}
    if window is None and ancestor_mask is None:
        attn = dense_attention(q.reshape(n, -1), k.reshape(n, -1), v.reshape(n, -1), **kw)
    else:
        attn = sliding_window_attention(
            q.reshape(n, -1), k.reshape(n, -1), v.reshape(n, -1),
            window=window if window is not None else n,
            ancestor_mask=ancestor_mask, **kw,
        )
    x = u + attn @ p[pref + "attn.wo"]
    h2 = rms_norm(x, p[pref + "mlp_norm.weight"])
    gate = h2 @ p[pref + "mlp.w_gate"]
    gated = (gate / (1.0 + np.exp(-gate))) * (h2 @ p[pref + "mlp.w_up"])
    return x + gated @ p[pref + "mlp.w_down"]


def mtp_logits(head: MTPHead, mtp_hiddens: np.ndarray) -> np.ndarray:
    """Shared output head applied to head states (final norm + LM projection)."""
    from .model import output_head

    return output_head(head.bundle, mtp_hiddens)


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood, accumulated in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ValidationError(
            f"logit rows {logits.shape} mismatch target count {targets.size}"
        )
    if targets.size == 0:
        raise ValidationError("no target positions")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits in cross entropy")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(targets.size), targets]
    return float(np.mean(lse - picked))


def ntp_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Next-token objective: mean cross-entropy over the predicted positions."""
    return cross_entropy(logits, targets)


def mtp_loss(head: MTPHead, hiddens: np.ndarray, tokens: np.ndarray) -> float:
    """Two-ahead objective over positions 0..l-3 (mean over predictions)."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    length = tokens.size
    if length < 3:
        raise ValidationError("need at least 3 tokens for a two-ahead prediction")
    if hiddens.shape[0] != length:
        raise ValidationError("hiddens/tokens length mismatch")
    states = mtp_hidden(head, hiddens[: length - 2], tokens[1 : length - 1])
    logits = mtp_logits(head, states)
    return cross_entropy(logits, tokens[2:])


@dataclasses.dataclass
class LossReport:
    l_ntp: float
    l_mtp: float
    lam: float
    total: float

    def validate(self) -> None:
        if abs(self.total - (self.l_ntp + self.lam * self.l_mtp)) > 1e-9:
            raise ValidationError("total inconsistent with components")


def combined_loss(l_ntp: float, l_mtp: float, lam: float = 0.3) -> LossReport:
    """Weighted objective: next-token loss plus lam times the two-ahead loss."""
    if lam < 0:
        raise ValidationError("loss weight must be non-negative")
    return LossReport(l_ntp=float(l_ntp), l_mtp=float(l_mtp), lam=float(lam),
                      total=float(l_ntp) + lam * float(l_mtp))


# --------------------------------------------------------------------------
# float64 forward/backward over the full computation
#
# The graph: embedding -> N main layers -> (a) final norm -> LM head -> NTP
# cross-entropy over positions 0..L-2, and (b) head branch from the hidden
# states of positions 0..L-3 -> combined objective. All arrays float64.


_EPS = 1e-6  # rms epsilon, matches model.rms_norm


def _rms_fwd(x: np.ndarray, g: np.ndarray):
    denom = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _EPS)
    y = x / denom * g
    return y, (x, denom, g)


def _rms_bwd(dy: np.ndarray, saved):
    x, denom, g = saved
    d = x.shape[-1]
    dg = (dy * x / denom).sum(axis=tuple(range(dy.ndim - 1)))
    common = (dy * g * x).sum(axis=-1, keepdims=True)
    dx = dy * g / denom - x * common / (d * denom**3)
    return dx, dg


def _rope_fwd(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos[:, None, :] + rotate_half(x) * sin[:, None, :]


def _rope_bwd(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # the rotation is orthogonal per position: the adjoint is the inverse spin
    return dy * cos[:, None, :] - rotate_half(dy) * sin[:, None, :]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _layer_fwd(p: dict[str, np.ndarray], pref: str, x: np.ndarray,
               cos: np.ndarray, sin: np.ndarray, cfg: ModelConfig):
    """One pre-norm transformer layer in float64; returns (output, tape)."""
    n = x.shape[0]
    hq, hkv, hd = cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim
    group = hq // hkv
    scale = 1.0 / np.sqrt(hd)

    h1, rms_a = _rms_fwd(x, p[pref + "attn_norm.weight"])
    q = (h1 @ p[pref + "attn.wq"]).reshape(n, hq, hd)
    k = (h1 @ p[pref + "attn.wk"]).reshape(n, hkv, hd)
    v = (h1 @ p[pref + "attn.wv"]).reshape(n, hkv, hd)
    qr = _rope_fwd(q, cos, sin)
    kr = _rope_fwd(k, cos, sin)

    mask = np.tril(np.ones((n, n), dtype=bool))
    probs = np.empty((hq, n, n))
    ctx = np.empty((n, hq, hd))
    for h in range(hq):
        g = h // group
        s = (qr[:, h, :] @ kr[:, g, :].T) * scale
        s = np.where(mask, s, -np.inf)
        probs[h] = softmax_f64(s, axis=-1)
        ctx[:, h, :] = probs[h] @ v[:, g, :]
    attn = ctx.reshape(n, hq * hd)
    x2 = x + attn @ p[pref + "attn.wo"]

    h2, rms_m = _rms_fwd(x2, p[pref + "mlp_norm.weight"])
    a = h2 @ p[pref + "mlp.w_gate"]
    b = h2 @ p[pref + "mlp.w_up"]
    sig = _sigmoid(a)
    sa = a * sig
    mp = sa * b
    out = x2 + mp @ p[pref + "mlp.w_down"]

    tape = dict(h1=h1, rms_a=rms_a, qr=qr, kr=kr, v=v, probs=probs, attn=attn,
                x2=x2, h2=h2, rms_m=rms_m, a=a, b=b, sig=sig, sa=sa, mp=mp)
    return out, tape


def _layer_bwd(p: dict[str, np.ndarray], pref: str, dout: np.ndarray,
               tape, cos: np.ndarray, sin: np.ndarray, cfg: ModelConfig,
               grads: dict[str, np.ndarray]) -> np.ndarray:
    n = dout.shape[0]
    hq, hkv, hd = cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim
    group = hq // hkv
    scale = 1.0 / np.sqrt(hd)

    # MLP block
    dmp = dout @ p[pref + "mlp.w_down"].T
    grads[pref + "mlp.w_down"] += tape["mp"].T @ dout
    dsa = dmp * tape["b"]
    db = dmp * tape["sa"]
    da = dsa * (tape["sig"] * (1.0 + tape["a"] * (1.0 - tape["sig"])))
    grads[pref + "mlp.w_gate"] += tape["h2"].T @ da
    grads[pref + "mlp.w_up"] += tape["h2"].T @ db
    dh2 = da @ p[pref + "mlp.w_gate"].T + db @ p[pref + "mlp.w_up"].T
    dx2, dgm = _rms_bwd(dh2, tape["rms_m"])
    grads[pref + "mlp_norm.weight"] += dgm
    dx2 = dx2 + dout  # residual

    # attention block
    dattn = dx2 @ p[pref + "attn.wo"].T
    grads[pref + "attn.wo"] += tape["attn"].T @ dx2
    dctx = dattn.reshape(n, hq, hd)
    qr, kr, v, probs = tape["qr"], tape["kr"], tape["v"], tape["probs"]
    dqr = np.zeros_like(qr)
    dkr = np.zeros_like(kr)
    dv = np.zeros_like(v)
    for h in range(hq):
        g = h // group
        dP = dctx[:, h, :] @ v[:, g, :].T
        dv[:, g, :] += probs[h].T @ dctx[:, h, :]
        ds = probs[h] * (dP - (dP * probs[h]).sum(axis=-1, keepdims=True))
        dqr[:, h, :] += (ds @ kr[:, g, :]) * scale
        dkr[:, g, :] += (ds.T @ qr[:, h, :]) * scale
    dq = _rope_bwd(dqr, cos, sin).reshape(n, hq * hd)
    dk = _rope_bwd(dkr, cos, sin).reshape(n, hkv * hd)
    dvf = dv.reshape(n, hkv * hd)
    h1 = tape["h1"]
    grads[pref + "attn.wq"] += h1.T @ dq
    grads[pref + "attn.wk"] += h1.T @ dk
    grads[pref + "attn.wv"] += h1.T @ dvf
    dh1 = (dq @ p[pref + "attn.wq"].T + dk @ p[pref + "attn.wk"].T
           + dvf @ p[pref + "attn.wv"].T)
    dx, dga = _rms_bwd(dh1, tape["rms_a"])
    grads[pref + "attn_norm.weight"] += dga
    return dx + dx2  # residual


def _ce_fwd_bwd(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    nrows = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    soft = z / z.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z.sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(nrows), targets]))
    dlogits = soft.copy()
    dlogits[np.arange(nrows), targets] -= 1.0
    dlogits /= nrows
    return loss, dlogits


def loss_and_grads(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    lam: float = 0.3,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Combined objective and analytic gradients for every parameter.

    ``params`` holds main-model and ``mtp.*`` tensors (any float dtype; math
    runs in float64). Gradients are returned for every key in ``params``.
    """
    if lam < 0:
        raise ValidationError("loss weight must be non-negative")
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    length = tokens.size
    if length < 3:
        raise ValidationError("need at least 3 tokens (two-ahead objective)")
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    tied = cfg.tied_lm_head
    w_lm = p["embedding"] if tied else p["lm_head"]

    def add_lm_grad(g: np.ndarray) -> None:
        grads["embedding" if tied else "lm_head"] += g

    # ---- forward, main model
    cos, sin = _rope64(cfg, np.arange(length))
    x = p["embedding"][tokens]
    tapes = []
    for i in range(cfg.n_layers):
        x, tape = _layer_fwd(p, f"layers.{i}.", x, cos, sin, cfg)
        tapes.append(tape)
    hiddens = x

    fn, rms_f_ntp = _rms_fwd(hiddens, p["final_norm.weight"])
    logits_ntp = fn @ w_lm.T
    l_ntp, dlogits_ntp = _ce_fwd_bwd(logits_ntp[: length - 1], tokens[1:])

    # ---- forward, head branch (rows 0..L-3)
    nh = length - 2
    next_toks = tokens[1 : length - 1]
    hs = hiddens[:nh]
    hn, rms_h = _rms_fwd(hs, p[MTP_PREFIX + "h_norm.weight"])
    emb_rows = p["embedding"][next_toks]
    en, rms_e = _rms_fwd(emb_rows, p[MTP_PREFIX + "e_norm.weight"])
    u = np.concatenate([hn, en], axis=-1) @ p[MTP_PREFIX + "combiner"]
    cos_m, sin_m = _rope64(cfg, np.arange(nh))
    mo, tape_m = _layer_fwd(p, MTP_PREFIX + "layer.", u, cos_m, sin_m, cfg)
    fm, rms_f_mtp = _rms_fwd(mo, p["final_norm.weight"])
    logits_mtp = fm @ w_lm.T
    l_mtp, dlogits_mtp = _ce_fwd_bwd(logits_mtp, tokens[2:])

    report = combined_loss(l_ntp, l_mtp, lam)

    # ---- backward, head branch (scaled by lam)
    dlogits_mtp *= lam
    dfm = dlogits_mtp @ w_lm
    add_lm_grad(dlogits_mtp.T @ fm)
    dmo, dgf_m = _rms_bwd(dfm, rms_f_mtp)
    grads["final_norm.weight"] += dgf_m
    du = _layer_bwd(p, MTP_PREFIX + "layer.", dmo, tape_m, cos_m, sin_m, cfg, grads)
    dcat = du @ p[MTP_PREFIX + "combiner"].T
    grads[MTP_PREFIX + "combiner"] += np.concatenate([hn, en], axis=-1).T @ du
    d = cfg.hidden_dim
    dhn, den = dcat[:, :d], dcat[:, d:]
    dhs, dgh = _rms_bwd(dhn, rms_h)
    grads[MTP_PREFIX + "h_norm.weight"] += dgh
    demb_rows, dge = _rms_bwd(den, rms_e)
    grads[MTP_PREFIX + "e_norm.weight"] += dge
    np.add.at(grads["embedding"], next_toks, demb_rows)

    # ---- backward, next-token branch
    pad = np.zeros((1, logits_ntp.shape[1]))
    dlogits_full = np.concatenate([dlogits_ntp, pad], axis=0)
    dfn = dlogits_full @ w_lm
    add_lm_grad(dlogits_full.T @ fn)
    dhiddens, dgf = _rms_bwd(dfn, rms_f_ntp)
    grads["final_norm.weight"] += dgf
    dhiddens[:nh] += dhs

    # ---- backward, main layers
    dx = dhiddens
    for i in reversed(range(cfg.n_layers)):
        dx = _layer_bwd(p, f"layers.{i}.", dx, tapes[i], cos, sin, cfg, grads)
    np.add.at(grads["embedding"], tokens, dx)

    return report, grads


def _rope64(cfg: ModelConfig, positions: np.ndarray):
    half = cfg.head_dim // 2
    inv = cfg.rope_base ** (-np.arange(0, half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos, sin


def loss_only(cfg: ModelConfig, params: dict[str, np.ndarray],
              tokens: np.ndarray, lam: float = 0.3) -> float:
    report, _ = loss_and_grads(cfg, params, tokens, lam)
    return report.total


# --------------------------------------------------------------------------
# gradient checking


@dataclasses.dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    *,
    n_coords: int = 100,
    eps: float = 1e-4,
    seed: int = 0,
    atol: float = 1e-7,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    Samples ``n_coords`` coordinates across all parameters. Relative error
    uses max(|analytic|, |numeric|, 1e-6) as denominator; coordinates where
    both sides are below ``atol`` count as exact (a relative error at zero is
    meaningless — e.g. an embedding row no token uses).
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValidationError("step size must lie in [1e-5, 1e-3]")
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = sorted(work)
    sizes = np.array([work[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    max_err, worst = 0.0, None
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        name = names[which]
        local = int(flat - (bounds[which] - sizes[which]))
        idx = np.unravel_index(local, work[name].shape)
        keep = work[name][idx]
        work[name][idx] = keep + eps
        up = loss_fn(work)
        work[name][idx] = keep - eps
        down = loss_fn(work)
        work[name][idx] = keep
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite loss during finite differences")
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name][idx])
        if abs(a) < atol and abs(numeric) < atol:
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        if rel > max_err:
            max_err, worst = rel, (name, idx)
    return GradCheckResult(max_rel_err=max_err, n_checked=len(picks), worst=worst)


# --------------------------------------------------------------------------
# toy training


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclasses.dataclass
class TrainReport:
    """Loss curve rows (step, l_ntp, l_mtp, total) plus run settings."""

    rows: list[tuple[int, float, float, float]]
    lam: float
    lr: float

    @property
    def initial_ntp(self) -> float:
        return self.rows[0][1]

    @property
    def final_ntp(self) -> float:
        return self.rows[-1][1]


def train_toy(
    bundle: ModelBundle,
    head: MTPHead,
    corpus: np.ndarray,
    *,
    steps: int = 200,
    lam: float = 0.3,
    lr: float = 0.5,
    window: int = 16,
    seed: int = 0,
) -> TrainReport:
    """Momentum-free SGD on the combined objective over corpus windows.

    Deterministic given the seed. Parameters are updated in place (float32
    storage, float64 math), preserving identity sharing with the head.
    Raises TrainingDivergedError if the loss exceeds 10x its initial value.
    """
    if steps < 1:
        raise ValidationError("steps must be at least 1")
    corpus = np.asarray(corpus, dtype=np.int64).reshape(-1)
    if window < 3 or corpus.size < window:
        raise ValidationError("corpus shorter than the training window (min 3)")
    head.validate()
    cfg = bundle.config
    rng = np.random.default_rng(seed)
    master = {k: np.asarray(v, dtype=np.float64) for k, v in bundle.params.items()}
    rows: list[tuple[int, float, float, float]] = []
    initial: Optional[float] = None
    for step in range(steps):
        off = int(rng.integers(0, corpus.size - window + 1))
        tokens = corpus[off : off + window]
        report, grads = loss_and_grads(cfg, master, tokens, lam)
        rows.append((step, report.l_ntp, report.l_mtp, report.total))
        if initial is None:
            initial = report.total
        elif report.total > 10 * initial:
            partial = TrainReport(rows=rows, lam=lam, lr=lr)
            raise TrainingDivergedError(
                f"loss {report.total:.4g} exceeded 10x initial {initial:.4g} "
                f"at step {step}", partial,
            )
        for k, g in grads.items():
            master[k] -= lr * g
    for k, v in master.items():
        bundle.params[k][...] = v.astype(np.float32)
    return TrainReport(rows=rows, lam=lam, lr=lr)
