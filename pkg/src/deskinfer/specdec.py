"""Speculative decoding: drafting, lossless verification, generation loops.

A cheap drafter proposes candidate continuations (a chain or a small tree);
the target model scores every candidate; a verification rule accepts a
prefix of the proposals and emits one bonus token from the target's own
distribution. Greedy verification reproduces the target's greedy stream
token for token. Sampled verification is a rejection scheme whose output is
distributed exactly as ancestral sampling from the target — losslessness
holds for any draft distribution, good or bad, as long as sampled drafts
were genuinely sampled from the distributions recorded in the batch.

Every cache mutation in the generation loops goes through single-token
forward steps. Identical steps on identical prefixes give bit-identical
float32 results, which is what makes greedy speculative output byte-equal
to plain greedy decoding (and keeps sparse-backend runs self-consistent).
A batched tree forward (`forward_tree`) consuming a packed ancestor mask is
provided as a separate API and agrees with sequential stepping to float32
matmul tolerance.
"""

from __future__ import annotations

import csv
import dataclasses
import heapq
from typing import Optional, Protocol

import numpy as np

from .container import ValidationError
from .model import (
    ForwardResult,
    KVCache,
    ModelBundle,
    NumericError,
    _masked_grouped_attention,
    apply_rope,
    forward,
    output_head,
    rms_norm,
    rope_angles,
    softmax_f64,
)
from .mtp import MTPHead, mtp_hidden
from .vocab import FrequencyVocab, ReducedHead, reduced_draft_probs

GREEDY = "greedy"
SAMPLED = "sampled"


# --------------------------------------------------------------------------
# draft batches and packed ancestor masks


@dataclasses.dataclass
class DraftBatch:
    """Tree (or chain) of drafted tokens in depth-first pre-order.

    ``parents[i]`` is the index of node i's parent, or -1 for children of
    the root (the current decoding position). ``q[i]`` is the exact
    distribution node i's token was drawn from, on the full-vocabulary
    scale — for siblings sampled without replacement this is the parent
    distribution with earlier siblings zeroed and renormalized. ``mode``
    records whether tokens were argmax picks or samples; sampled
    verification refuses greedy batches (their tokens were not drawn from
    ``q``, so the rejection identity would not hold).
    """

    tokens: np.ndarray   # (n,) int64
    parents: np.ndarray  # (n,) int64
    depths: np.ndarray   # (n,) int64, root children have depth 1
    q: np.ndarray        # (n, vocab) float64
    mode: str

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def vocab_size(self) -> int:
        return int(self.q.shape[1])

    def children(self) -> list[list[int]]:
        """Per-parent child lists; index -1's list is at key ``root``."""
        out: list[list[int]] = [[] for _ in range(len(self) + 1)]
        for i, p in enumerate(self.parents):
            out[int(p) + 1].append(i)
        return out

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise ValidationError("empty draft batch")
        if self.mode not in (GREEDY, SAMPLED):
            raise ValidationError(f"unknown draft mode {self.mode!r}")
        if self.parents.shape != (n,) or self.depths.shape != (n,):
            raise ValidationError("parent/depth arrays must match token count")
        if self.q.shape != (n, self.q.shape[1]):
            raise ValidationError("draft distributions must be (n, vocab)")
        for i in range(n):
            p = int(self.parents[i])
            if not -1 <= p < i:
                raise ValidationError(f"node {i} parent {p} out of order")
            want = 1 if p < 0 else int(self.depths[p]) + 1
            if int(self.depths[i]) != want:
                raise ValidationError(f"node {i} depth {self.depths[i]} != {want}")
            if not 0 <= int(self.tokens[i]) < self.q.shape[1]:
                raise ValidationError(f"node {i} token out of range")
        if (self.q < 0).any() or not np.isfinite(self.q).all():
            raise ValidationError("draft distributions must be finite and non-negative")
        sums = self.q.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValidationError("draft distribution rows must sum to 1")
        if (self.q[np.arange(n), self.tokens] <= 0).any():
            raise ValidationError("drafted token has zero draft probability")


@dataclasses.dataclass
class PackedMask:
    """Ancestor-or-self visibility for tree nodes, bit-packed row-wise.

    Bit (i, j) — word ``j // 64`` of row i, bit ``j % 64`` — is set when
    node j is node i or one of its ancestors. A 3-node chain packs to rows
    0b001, 0b011, 0b111.
    """

    words: np.ndarray  # (n, ceil(n/64)) uint64
    n_nodes: int

    @classmethod
    def from_parents(cls, parents: np.ndarray) -> "PackedMask":
        parents = np.asarray(parents, dtype=np.int64).reshape(-1)
        n = parents.size
        n_words = max(1, -(-n // 64))
        words = np.zeros((n, n_words), dtype=np.uint64)
        for i in range(n):
            p = int(parents[i])
            if not -1 <= p < i:
                raise ValidationError(f"node {i} parent {p} out of order")
            if p >= 0:
                words[i] = words[p]
            words[i, i // 64] |= np.uint64(1) << np.uint64(i % 64)
        return cls(words=words, n_nodes=n)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for j in range(self.n_nodes):
            dense[:, j] = (self.words[:, j // 64] >> np.uint64(j % 64)) & np.uint64(1)
        return dense

    def validate(self) -> None:
        if self.words.dtype != np.uint64 or self.words.ndim != 2:
            raise ValidationError("mask words must be a 2-D uint64 array")
        if self.words.shape != (self.n_nodes, max(1, -(-self.n_nodes // 64))):
            raise ValidationError("mask word array has the wrong shape")
        dense = self.to_dense()
        if not dense.diagonal().all():
            raise ValidationError("every node must see itself")


# --------------------------------------------------------------------------
# drafters


class Drafter(Protocol):  # pragma: no cover - typing aid
    draft_macs_per_eval: int
    full_macs_per_eval: int
    n_evals: int

    def begin(self, tokens: np.ndarray, anchor_hidden: Optional[np.ndarray]) -> None: ...

    def path_distribution(self, path: tuple[int, ...]) -> np.ndarray: ...


class SelfDrafter:
    """Drafts with the target model itself (maximal-quality drafts).

    Keeps a private cache and mirrors the generation loop's single-token
    stepping, so its distributions are bit-identical to the verifier's —
    greedy self-drafts are always fully accepted. Costs one full model call
    per drafted token; useful as a correctness baseline, not a speedup.
    """

    def __init__(self, bundle: ModelBundle, *, backend: str = "dense",
                 sparse_config=None):
        self.bundle = bundle
        self.backend = backend
        self.sparse_config = sparse_config
        d = bundle.config.hidden_dim
        self.draft_macs_per_eval = bundle.config.vocab_size * d
        self.full_macs_per_eval = bundle.config.vocab_size * d
        self.n_evals = 0
        self._cache = make_cache(bundle, backend, sparse_config)
        self._held: list[int] = []   # tokens currently in the private cache
        self._base = 0               # prefix length for the active round
        self._dists: dict[tuple[int, ...], np.ndarray] = {}

    def _step(self, token: int) -> np.ndarray:
        res = forward(self.bundle, [token], self._cache,
                      backend=self.backend, sparse_config=self.sparse_config)
        self.n_evals += 1
        return softmax_f64(res.logits[-1].astype(np.float64))

    def _sync(self, target: list[int]) -> Optional[np.ndarray]:
        """Make the private cache hold exactly ``target``; return last dist."""
        common = 0
        while (common < len(target) and common < len(self._held)
               and self._held[common] == target[common]):
            common += 1
        self._cache.truncate(common)
        del self._held[common:]
        last = None
        for tok in target[common:]:
            last = self._step(tok)
            self._held.append(tok)
        return last

    def begin(self, tokens, anchor_hidden=None) -> None:
        tokens = [int(t) for t in np.asarray(tokens).reshape(-1)]
        if not tokens:
            raise ValidationError("cannot draft from an empty prefix")
        last = self._sync(tokens)
        self._base = len(tokens)
        self._dists = {}
        if last is not None:
            self._dists[()] = last

    def path_distribution(self, path: tuple[int, ...]) -> np.ndarray:
        path = tuple(int(t) for t in path)
        if path not in self._dists:
            last = self._sync(self._held[: self._base] + list(path))
            if last is None:  # fully cached: recompute the final step
                self._cache.truncate(self._base + len(path) - 1)
                del self._held[self._base + len(path) - 1 :]
                last = self._step(path[-1])
                self._held.append(path[-1])
            self._dists[path] = last
        return self._dists[path]


class MTPDrafter:
    """Drafts with the trained two-ahead head.

    The anchor row pairs the main model's hidden state at the second-to-last
    position with the last token's embedding; each later row feeds the
    head's own output state back as the next hidden input. Rows attend with
    a sliding window (tree paths re-attend their own ancestors only, by
    recomputing per path). With a frequency vocabulary the output
    projection is the reduced head, cutting the per-candidate logit cost by
    the subset's reduction factor.
    """

    def __init__(self, head: MTPHead, *, vocab: Optional[FrequencyVocab] = None,
                 window: int = 8):
        self.head = head
        self.window = int(window)
        cfg = head.config
        self.reduced = ReducedHead(head.lm_head, vocab) if vocab is not None else None
        per = self.reduced.macs_per_token if self.reduced else cfg.vocab_size * cfg.hidden_dim
        self.draft_macs_per_eval = per
        self.full_macs_per_eval = cfg.vocab_size * cfg.hidden_dim
        self.n_evals = 0
        self._anchor: Optional[np.ndarray] = None
        self._last_token = -1
        self._states: dict[tuple[int, ...], np.ndarray] = {}
        self._dists: dict[tuple[int, ...], np.ndarray] = {}

    def begin(self, tokens, anchor_hidden=None) -> None:
        tokens = np.asarray(tokens).reshape(-1)
        if tokens.size < 2:
            raise ValidationError(
                "two-ahead drafting needs at least 2 prefix tokens"
            )
        if anchor_hidden is None:
            raise ValidationError(
                "two-ahead drafting needs the hidden state one position back"
            )
        if self.reduced is not None:
            self.reduced.check_fresh()
        self._anchor = np.asarray(anchor_hidden, dtype=np.float32).reshape(-1)
        self._last_token = int(tokens[-1])
        self._states = {}
        self._dists = {}

    def _state(self, path: tuple[int, ...]) -> np.ndarray:
        """Head output state after following ``path`` from the anchor row."""
        if path in self._states:
            return self._states[path]
        if self._anchor is None:
            raise ValidationError("begin() must run before drafting")
        hidden_rows = [self._anchor]
        token_rows = [self._last_token]
        for i in range(1, len(path) + 1):
            hidden_rows.append(self._state(path[: i - 1]))
            token_rows.append(int(path[i - 1]))
        states = mtp_hidden(
            self.head,
            np.stack(hidden_rows),
            np.asarray(token_rows, dtype=np.int64),
            window=self.window,
        )
        self._states[path] = states[-1]
        return states[-1]

    def path_distribution(self, path: tuple[int, ...]) -> np.ndarray:
        path = tuple(int(t) for t in path)
        if path not in self._dists:
            state = self._state(path)
            if self.reduced is not None:
                normed = rms_norm(state[None, :],
                                  self.head.params["final_norm.weight"])[0]
                dist = reduced_draft_probs(normed, self.reduced)
            else:
                logits = output_head(self.head.bundle, state[None, :])[0]
                dist = softmax_f64(logits.astype(np.float64))
            self.n_evals += 1
            self._dists[path] = dist
        return self._dists[path]


# --------------------------------------------------------------------------
# drafting


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; zero-probability entries are unreachable."""
    c = np.cumsum(probs)
    if not np.isfinite(c[-1]) or c[-1] <= 0:
        raise NumericError("cannot sample from an all-zero distribution")
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def draft_chain(
    drafter: Drafter,
    n_draft: int,
    *,
    greedy: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> DraftBatch:
    """Draft a single path of ``n_draft`` tokens."""
    if n_draft < 1:
        raise ValidationError("must draft at least one token")
    if not greedy and rng is None:
        raise ValidationError("sampled drafting needs an rng")
    path: tuple[int, ...] = ()
    tokens, qs = [], []
    for _ in range(n_draft):
        q = drafter.path_distribution(path)
        tok = int(np.argmax(q)) if greedy else sample_index(q, rng)
        tokens.append(tok)
        qs.append(q)
        path += (tok,)
    n = len(tokens)
    batch = DraftBatch(
        tokens=np.asarray(tokens, dtype=np.int64),
        parents=np.arange(-1, n - 1, dtype=np.int64),
        depths=np.arange(1, n + 1, dtype=np.int64),
        q=np.stack(qs),
        mode=GREEDY if greedy else SAMPLED,
    )
    batch.validate()
    return batch


MAX_TREE_DEPTH = 4


@dataclasses.dataclass
class _TreeNode:
    token: int
    parent: int            # -1 for root children
    depth: int
    q: np.ndarray
    cumprob: float
    children: list[int] = dataclasses.field(default_factory=list)


def draft_tree(
    drafter: Drafter,
    *,
    budget: int = 8,
    branching: tuple[int, ...] = (2, 2, 1, 1),
    greedy: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> tuple[DraftBatch, PackedMask]:
    """Draft a candidate tree of at most ``budget`` nodes.

    ``branching[d-1]`` caps the children of a node at depth d-1 (so the
    schedule's length caps the tree depth, at most 4). Expansion is ordered
    by cumulative draft probability: the unexpanded node whose path is most
    likely under the drafter grows next, so budget flows toward plausible
    continuations. Sampled children are drawn without replacement; each
    child's recorded distribution is the one it was actually drawn from.
    Nodes are emitted in depth-first pre-order.
    """
    if budget < 1:
        raise ValidationError("tree budget must be at least 1")
    if not branching or len(branching) > MAX_TREE_DEPTH:
        raise ValidationError(
            f"branching schedule must have 1..{MAX_TREE_DEPTH} levels"
        )
    if any(b < 1 for b in branching):
        raise ValidationError("branching factors must be positive")
    if not greedy and rng is None:
        raise ValidationError("sampled drafting needs an rng")

    nodes: list[_TreeNode] = []
    root_children: list[int] = []
    paths: dict[int, tuple[int, ...]] = {-1: ()}
    # heap of expandable nodes: (-cumulative probability, node id)
    frontier: list[tuple[float, int]] = [(-1.0, -1)]
    remaining = budget
    while remaining > 0 and frontier:
        _, nid = heapq.heappop(frontier)
        depth = 0 if nid < 0 else nodes[nid].depth
        if depth >= len(branching):
            continue
        base_q = drafter.path_distribution(paths[nid])
        q_rem = np.array(base_q, dtype=np.float64)
        cum = 1.0 if nid < 0 else nodes[nid].cumprob
        for _ in range(min(branching[depth], remaining)):
            total = q_rem.sum()
            if total <= 0:
                break
            q_store = q_rem / total
            if greedy:
                tok = int(np.argmax(q_store))
            else:
                tok = sample_index(q_store, rng)
            child = _TreeNode(token=tok, parent=nid, depth=depth + 1,
                              q=q_store, cumprob=cum * float(q_store[tok]))
            cid = len(nodes)
            nodes.append(child)
            paths[cid] = paths[nid] + (tok,)
            (root_children if nid < 0 else nodes[nid].children).append(cid)
            if child.depth < len(branching):
                heapq.heappush(frontier, (-child.cumprob, cid))
            remaining -= 1
            q_rem = q_rem.copy()
            q_rem[tok] = 0.0

    if not nodes:
        raise ValidationError("drafter produced no candidates")

    # re-emit in depth-first pre-order
    order: list[int] = []

    def walk(ids: list[int]) -> None:
        for i in ids:
            order.append(i)
            walk(nodes[i].children)

    walk(root_children)
    new_index = {old: new for new, old in enumerate(order)}
    tokens = np.asarray([nodes[i].token for i in order], dtype=np.int64)
    parents = np.asarray(
        [-1 if nodes[i].parent < 0 else new_index[nodes[i].parent] for i in order],
        dtype=np.int64,
    )
    depths = np.asarray([nodes[i].depth for i in order], dtype=np.int64)
    q = np.stack([nodes[i].q for i in order])
    batch = DraftBatch(tokens=tokens, parents=parents, depths=depths, q=q,
                       mode=GREEDY if greedy else SAMPLED)
    batch.validate()
    return batch, PackedMask.from_parents(parents)


# --------------------------------------------------------------------------
# verification


@dataclasses.dataclass
class VerifyOutcome:
    accepted: list[int]       # node indices along the accepted path
    tokens: list[int]         # accepted tokens plus the bonus token
    bonus_token: int
    trail: list[tuple[int, bool]]  # per-node accept/reject decisions, in order

    @property
    def n_accepted(self) -> int:
        return len(self.accepted)


def verify(
    target_probs: np.ndarray,
    batch: DraftBatch,
    *,
    rng: Optional[np.random.Generator] = None,
    greedy: bool = False,
) -> VerifyOutcome:
    """Accept a path through the draft batch; always emits one bonus token.

    ``target_probs`` has one more row than the batch has nodes: row 0 is the
    target's next-token distribution at the current position, and row i+1 is
    its distribution after consuming node i's token (given node i's path).

    Greedy mode walks the tree accepting a child only when its token is the
    target argmax — the emitted stream equals plain greedy decoding.
    Sampled mode runs residual rejection: each sibling is accepted with
    probability min(1, p/q) under the current residual target distribution;
    a rejection folds the sibling's draft distribution out of both sides
    (matching the without-replacement draw), and when no sibling survives
    the bonus token is drawn from the residual. The emitted tokens are
    distributed exactly as ancestral samples from ``target_probs``.
    """
    batch.validate()
    n = len(batch)
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if target_probs.shape != (n + 1, batch.vocab_size):
        raise ValidationError(
            f"need {n + 1} x {batch.vocab_size} target rows, got {target_probs.shape}"
        )
    if not np.isfinite(target_probs).all() or (target_probs < 0).any():
        raise ValidationError("target distributions must be finite and non-negative")
    if not greedy:
        if rng is None:
            raise ValidationError("sampled verification needs an rng")
        if batch.mode != SAMPLED:
            raise ValidationError(
                "sampled verification requires sampled drafts; argmax drafts "
                "were not drawn from their recorded distributions"
            )

    children = batch.children()
    accepted: list[int] = []
    trail: list[tuple[int, bool]] = []
    current = children[0]  # root's children
    p = target_probs[0].copy()
    while True:
        chosen: Optional[int] = None
        for c in current:
            tok = int(batch.tokens[c])
            if greedy:
                ok = tok == int(np.argmax(p))
            else:
                q_c = batch.q[c]
                if q_c[tok] <= 0:
                    raise NumericError("drafted token has zero draft probability")
                ok = rng.random() < p[tok] / q_c[tok]
            trail.append((c, ok))
            if ok:
                chosen = c
                break
            if not greedy:
                p = np.maximum(p - batch.q[c], 0.0)
                total = p.sum()
                if total <= 0:
                    raise NumericError("verification residual vanished")
                p /= total
        if chosen is None:
            bonus = int(np.argmax(p)) if greedy else sample_index(p, rng)
            break
        accepted.append(chosen)
        p = target_probs[chosen + 1].copy()
        current = children[chosen + 1]

    tokens = [int(batch.tokens[c]) for c in accepted] + [bonus]
    return VerifyOutcome(accepted=accepted, tokens=tokens,
                         bonus_token=bonus, trail=trail)


# --------------------------------------------------------------------------
# batched tree forward (packed-mask consumer)


def forward_tree(
    bundle: ModelBundle,
    cache: KVCache,
    tokens: np.ndarray,
    depths: np.ndarray,
    mask: PackedMask,
) -> ForwardResult:
    """Score all tree nodes in one batched pass without touching the cache.

    Node i sits at absolute position ``cache.length + depths[i] - 1``; it
    sees every cached row plus the tree rows its packed mask row admits
    (its ancestors and itself). The cache is read, never modified, so any
    branch can be committed afterwards by re-stepping its tokens.
    """
    cfg = bundle.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    depths = np.asarray(depths, dtype=np.int64).reshape(-1)
    n = tokens.size
    if n == 0:
        raise ValidationError("empty tree batch")
    if depths.shape != (n,) or mask.n_nodes != n:
        raise ValidationError("tokens, depths, and mask disagree on node count")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValidationError("token id out of range")
    base = cache.length
    if base == 0:
        raise ValidationError("tree scoring needs a non-empty prefix cache")
    tree_vis = mask.to_dense()

    positions = base + depths - 1
    cos, sin = rope_angles(cfg, positions)
    p = bundle.params
    x = p["embedding"][tokens].astype(np.float32)
    allowed = np.concatenate(
        [np.ones((n, base), dtype=bool), tree_vis], axis=1
    )
    for i in range(cfg.n_layers):
        lp = f"layers.{i}."
        h = rms_norm(x, p[lp + "attn_norm.weight"])
        q = (h @ p[lp + "attn.wq"]).reshape(n, cfg.n_q_heads, cfg.head_dim)
        k = (h @ p[lp + "attn.wk"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        v = (h @ p[lp + "attn.wv"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        layer = cache.layers[i]
        keys = np.concatenate([layer.keys, k], axis=0)
        values = np.concatenate([layer.values, v], axis=0)
        attn = _masked_grouped_attention(
            q.reshape(n, -1),
            keys.reshape(keys.shape[0], -1),
            values.reshape(values.shape[0], -1),
            allowed,
            cfg.n_q_heads,
            cfg.n_kv_heads,
        )
        x = x + attn @ p[lp + "attn.wo"]
        h = rms_norm(x, p[lp + "mlp_norm.weight"])
        gate = h @ p[lp + "mlp.w_gate"]
        gated = (gate / (1.0 + np.exp(-gate))) * (h @ p[lp + "mlp.w_up"])
        x = x + gated @ p[lp + "mlp.w_down"]
    return ForwardResult(logits=output_head(bundle, x), hiddens=x)


# --------------------------------------------------------------------------
# generation loops


def make_cache(bundle: ModelBundle, backend: str = "dense", sparse_config=None) -> KVCache:
    if backend == "sparse":
        from . import sparse as _sparse

        return _sparse.blockized_cache(
            bundle.config, sparse_config or _sparse.SparseAttentionConfig()
        )
    if backend != "dense":
        raise ValidationError(f"unknown attention backend {backend!r}")
    return KVCache(bundle.config)


@dataclasses.dataclass
class SpecRound:
    step: int
    drafted: int
    accepted: int
    bonus: int
    head_macs_draft: int
    head_macs_full: int


@dataclasses.dataclass
class SpecStats:
    rounds: list[SpecRound] = dataclasses.field(default_factory=list)

    COLUMNS = ("step", "drafted", "accepted", "bonus",
               "head_macs_draft", "head_macs_full")

    @property
    def total_drafted(self) -> int:
        return sum(r.drafted for r in self.rounds)

    @property
    def total_accepted(self) -> int:
        return sum(r.accepted for r in self.rounds)

    @property
    def mean_accepted(self) -> float:
        return self.total_accepted / len(self.rounds) if self.rounds else 0.0

    @property
    def mean_emitted(self) -> float:
        if not self.rounds:
            return 0.0
        return sum(r.accepted + r.bonus for r in self.rounds) / len(self.rounds)

    def write_csv(self, path) -> None:
        from .container import atomic_write

        lines = [",".join(self.COLUMNS)]
        for r in self.rounds:
            lines.append(",".join(str(getattr(r, c)) for c in self.COLUMNS))
        atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


@dataclasses.dataclass
class GenerateResult:
    tokens: list[int]           # newly generated tokens (prompt excluded)
    stats: Optional[SpecStats]  # populated by speculative runs


def _distribution(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    z = logits.astype(np.float64)
    if temperature != 1.0:
        z = z / temperature
    return softmax_f64(z)


class _Stepper:
    """Single-token forward steps with hidden-state tracking."""

    def __init__(self, bundle: ModelBundle, cache: KVCache, backend: str,
                 sparse_config, temperature: float):
        self.bundle = bundle
        self.cache = cache
        self.backend = backend
        self.sparse_config = sparse_config
        self.temperature = temperature
        self.last_dist: Optional[np.ndarray] = None
        self.hidden_last: Optional[np.ndarray] = None
        self.hidden_prev: Optional[np.ndarray] = None

    def step(self, token: int) -> np.ndarray:
        res = forward(self.bundle, [token], self.cache,
                      backend=self.backend, sparse_config=self.sparse_config)
        self.hidden_prev = self.hidden_last
        self.hidden_last = res.hiddens[-1]
        self.last_dist = _distribution(res.logits[-1], self.temperature)
        return self.last_dist

    def step_scratch(self, token: int) -> np.ndarray:
        """Step without promoting hidden/dist state (draft scoring)."""
        res = forward(self.bundle, [token], self.cache,
                      backend=self.backend, sparse_config=self.sparse_config)
        return _distribution(res.logits[-1], self.temperature)


def _emit(tokens: list[int], limit: int, eos_id: Optional[int]) -> tuple[list[int], bool]:
    """Trim a round's emission to the budget and first end-of-sequence."""
    out: list[int] = []
    for t in tokens[:limit]:
        out.append(t)
        if eos_id is not None and t == eos_id:
            return out, True
    return out, False


def generate(
    bundle: ModelBundle,
    prompt: np.ndarray,
    *,
    max_new_tokens: int,
    backend: str = "dense",
    sparse_config=None,
    greedy: bool = True,
    temperature: float = 1.0,
    seed: int = 0,
    eos_id: Optional[int] = None,
) -> GenerateResult:
    """Plain autoregressive decoding (the speculative paths' reference)."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValidationError("prompt must contain at least one token")
    if max_new_tokens < 1:
        raise ValidationError("must generate at least one token")
    rng = np.random.default_rng(seed)
    cache = make_cache(bundle, backend, sparse_config)
    st = _Stepper(bundle, cache, backend, sparse_config, temperature)
    for tok in prompt:
        st.step(int(tok))
    out: list[int] = []
    for _ in range(max_new_tokens):
        dist = st.last_dist
        tok = int(np.argmax(dist)) if greedy else sample_index(dist, rng)
        out.append(tok)
        if eos_id is not None and tok == eos_id:
            break
        st.step(tok)
    return GenerateResult(tokens=out, stats=None)


def speculative_generate(
    bundle: ModelBundle,
    prompt: np.ndarray,
    drafter: Drafter,
    *,
    max_new_tokens: int,
    n_draft: int = 4,
    tree_budget: Optional[int] = None,
    branching: tuple[int, ...] = (2, 2, 1, 1),
    backend: str = "dense",
    sparse_config=None,
    greedy: bool = True,
    temperature: float = 1.0,
    seed: int = 0,
    eos_id: Optional[int] = None,
) -> GenerateResult:
    """Draft/verify decoding loop; lossless relative to :func:`generate`.

    Greedy runs produce byte-identical streams to plain greedy decoding;
    sampled runs produce streams distributed identically to plain sampling.
    ``tree_budget`` switches from chain drafts of ``n_draft`` tokens to tree
    drafts of that many nodes.
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValidationError("prompt must contain at least one token")
    if max_new_tokens < 1:
        raise ValidationError("must generate at least one token")
    rng = np.random.default_rng(seed)
    cache = make_cache(bundle, backend, sparse_config)
    st = _Stepper(bundle, cache, backend, sparse_config, temperature)
    context = [int(t) for t in prompt]
    for tok in context:
        st.step(tok)

    stats = SpecStats()
    out: list[int] = []
    step_idx = 0
    while len(out) < max_new_tokens:
        drafter.begin(context, anchor_hidden=st.hidden_prev)
        evals_before = drafter.n_evals
        if tree_budget is not None:
            batch, _mask = draft_tree(drafter, budget=tree_budget,
                                      branching=branching, greedy=greedy, rng=rng)
        else:
            batch = draft_chain(drafter, n_draft, greedy=greedy, rng=rng)
        evals = drafter.n_evals - evals_before

        # score every node sequentially (depth-first order makes each
        # truncation leave exactly the node's ancestor path in the cache)
        base = cache.length
        rows = [st.last_dist]
        for i in range(len(batch)):
            cache.truncate(base + int(batch.depths[i]) - 1)
            rows.append(st.step_scratch(int(batch.tokens[i])))
        outcome = verify(np.stack(rows), batch, rng=rng, greedy=greedy)

        # commit: rewind the drafts, then re-step the emitted tokens
        cache.truncate(base)
        emitted, hit_eos = _emit(outcome.tokens, max_new_tokens - len(out), eos_id)
        for tok in emitted:
            st.step(tok)
        context.extend(emitted)
        out.extend(emitted)
        bonus_kept = int(len(emitted) > len(outcome.accepted))
        stats.rounds.append(SpecRound(
            step=step_idx,
            drafted=len(batch),
            accepted=outcome.n_accepted,
            bonus=bonus_kept,
            head_macs_draft=evals * drafter.draft_macs_per_eval,
            head_macs_full=evals * drafter.full_macs_per_eval,
        ))
        step_idx += 1
        if hit_eos:
            break
    return GenerateResult(tokens=out, stats=stats)
