"""Two-branch candidate association network.

Each candidate carries a classifier score, an image position and two raw
appearance vectors (low- and high-level). Both branches encode a candidate as
``proj(raw) + psi(score, x, y)``, pass messages with alternating self/cross
attention between the previous and current frame, and project to final
embeddings. Branch similarities are blended with a fixed weight ``omega``
(``omega`` on the high branch) and turned into a dustbin-augmented soft
assignment by log-domain Sinkhorn normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping, Sequence as Seq

import numpy as np

from . import tinynet as tn
from .geometry import Point
from .tinynet import AttentionParams, MlpParams, Tensor

BRANCHES = ("high", "low")


@dataclass
class MatcherConfig:
    d: int = 32
    raw_width: int = 32
    layers: int = 4
    n_max: int = 16
    omega: float = 0.2
    image_size: tuple[float, float] = (128.0, 128.0)
    tau_match: float = 0.2
    iters_infer: int = 100
    iters_train: int = 50
    alpha_init: float = 1.0
    # "both" or "high"; the latter skips the low branch entirely
    branches: str = "both"

    def __post_init__(self):
        self.image_size = tuple(float(v) for v in self.image_size)
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.branches not in ("both", "high"):
            raise ValueError(f"unknown branch mode {self.branches!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


# ---------------------------------------------------------------- candidates


@dataclass(frozen=True)
class Candidate:
    position: Point
    score: float
    feat_high: np.ndarray
    feat_low: np.ndarray
    object_id: int | None = None


def _rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2 and a.shape[0] == n:
        return a
    # reshape(0, -1) is ambiguous, so empty sets must arrive as (0, width)
    return a.reshape(n, -1)


@dataclass
class CandidateSet:
    """Column-wise store of N candidates."""

    positions: np.ndarray  # (N, 2) pixels
    scores: np.ndarray  # (N,)
    feat_high: np.ndarray  # (N, raw_width)
    feat_low: np.ndarray  # (N, raw_width)
    object_ids: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.scores)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.feat_high = _rows(self.feat_high, n)
        self.feat_low = _rows(self.feat_low, n)
        if not self.object_ids:
            self.object_ids = [None] * n
        if len(self.object_ids) != n or len(self.feat_high) != n or len(self.feat_low) != n:
            raise ValueError("candidate columns differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite candidate score")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, i: int) -> Candidate:
        return Candidate(
            Point(*self.positions[i]), float(self.scores[i]), self.feat_high[i], self.feat_low[i],
            self.object_ids[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls, width: int) -> "CandidateSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, width)), np.zeros((0, width)), [])

    @classmethod
    def from_candidates(cls, cands: Iterable[Candidate], width: int) -> "CandidateSet":
        cands = list(cands)
        if not cands:
            return cls.empty(width)
        return cls(
            np.array([[c.position.x, c.position.y] for c in cands]),
            np.array([c.score for c in cands]),
            np.stack([c.feat_high for c in cands]),
            np.stack([c.feat_low for c in cands]),
            [c.object_id for c in cands],
        )

    def subset(self, idx: Seq[int]) -> "CandidateSet":
        idx = list(idx)
        if not idx:
            return CandidateSet.empty(self.feat_high.shape[1])
        return CandidateSet(
            self.positions[idx], self.scores[idx], self.feat_high[idx], self.feat_low[idx],
            [self.object_ids[i] for i in idx],
        )

    def permuted(self, perm: Seq[int]) -> "CandidateSet":
        return self.subset(perm)

    def with_appended(self, c: Candidate) -> "CandidateSet":
        return CandidateSet.from_candidates(list(self) + [c], self.feat_high.shape[1])


@dataclass
class EncodedSet:
    codes_high: Tensor
    codes_low: Tensor | None


@dataclass
class EmbeddingSet:
    emb_high: Tensor
    emb_low: Tensor | None


@dataclass
class SimilarityPair:
    S_high: Tensor
    S_low: Tensor | None
    fused: Tensor | None = None
    omega: float | None = None


@dataclass
class AssignmentMatrix:
    """(N'+1) x (N+1) soft assignment; last row and column are dustbins."""

    probs: np.ndarray
    log_probs: Tensor | None = None

    @property
    def n_prev(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def n_cur(self) -> int:
        return self.probs.shape[1] - 1


# ---------------------------------------------------------------- parameters


def init_params(cfg: MatcherConfig, seed: int) -> dict[str, np.ndarray]:
    """Flat name -> array store. Both branches are always initialised, high first."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d = cfg.d
    for br in BRANCHES:
        p[f"{br}.proj.w"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.raw_width), (cfg.raw_width, d))
        p[f"{br}.proj.b"] = np.zeros((1, d))
        psi = MlpParams.init([3, d, d], rng)
        for k, v in psi.named().items():
            p[f"{br}.psi.{k}"] = v
        for layer in range(cfg.layers):
            att = AttentionParams.init(d, rng, out_scale=0.5)
            for k, v in att.named().items():
                p[f"{br}.gnn.{layer}.{k}"] = v
        p[f"{br}.final.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[f"{br}.final.b"] = np.zeros((1, d))
    p["alpha"] = np.full((1, 1), float(cfg.alpha_init))
    return p


def _sub(params: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _active(cfg: MatcherConfig) -> tuple[str, ...]:
    return ("high",) if cfg.branches == "high" else BRANCHES


# ---------------------------------------------------------------- forward pieces


def _normalised_inputs(cset: CandidateSet, cfg: MatcherConfig) -> np.ndarray:
    w, h = cfg.image_size
    return np.column_stack([cset.scores, cset.positions[:, 0] / w, cset.positions[:, 1] / h])


def encode(cset: CandidateSet, params: Mapping, cfg: MatcherConfig) -> EncodedSet:
    """code = proj(raw feature) + psi(score, normalised position), per branch."""
    if len(cset) and cset.feat_high.shape[1] != cfg.raw_width:
        raise ValueError(f"feature width {cset.feat_high.shape[1]} != {cfg.raw_width}")
    sc = _normalised_inputs(cset, cfg)
    codes = {}
    for br in _active(cfg):
        raw = cset.feat_high if br == "high" else cset.feat_low
        f = tn.linear(Tensor(raw), params[f"{br}.proj.w"], params[f"{br}.proj.b"])
        psi = MlpParams.from_named(_sub(params, f"{br}.psi."))
        codes[br] = f + tn.mlp_forward(psi, Tensor(sc))
    return EncodedSet(codes["high"], codes.get("low"))


def _message_passing(x0: Tensor, x1: Tensor, params: Mapping, br: str, cfg: MatcherConfig):
    for layer in range(cfg.layers):
        att = AttentionParams.from_named(_sub(params, f"{br}.gnn.{layer}."))
        if layer % 2 == 0:
            m0 = tn.attention_forward(att, x0, x0)
            m1 = tn.attention_forward(att, x1, x1)
        else:
            m0 = tn.attention_forward(att, x0, x1)
            m1 = tn.attention_forward(att, x1, x0)
        x0, x1 = x0 + m0, x1 + m1
    w, b = params[f"{br}.final.w"], params[f"{br}.final.b"]
    return tn.linear(x0, w, b), tn.linear(x1, w, b)


def embed(prev: EncodedSet, cur: EncodedSet, params: Mapping, cfg: MatcherConfig):
    """Alternating self/cross attention with residuals, then a shared final projection."""
    out_prev, out_cur = {}, {}
    for br in _active(cfg):
        a = prev.codes_high if br == "high" else prev.codes_low
        b = cur.codes_high if br == "high" else cur.codes_low
        if a.shape[1] != b.shape[1]:
            raise ValueError("encoded widths differ between frames")
        out_prev[br], out_cur[br] = _message_passing(a, b, params, br, cfg)
    return (
        EmbeddingSet(out_prev["high"], out_prev.get("low")),
        EmbeddingSet(out_cur["high"], out_cur.get("low")),
    )


def similarity(prev_emb: EmbeddingSet, cur_emb: EmbeddingSet) -> SimilarityPair:
    """S[i, j] = <prev_i, cur_j> per branch; rows index the previous frame."""
    if prev_emb.emb_high.shape[1] != cur_emb.emb_high.shape[1]:
        raise ValueError("embedding widths differ")
    s_high = prev_emb.emb_high @ cur_emb.emb_high.T
    s_low = None
    if prev_emb.emb_low is not None and cur_emb.emb_low is not None:
        s_low = prev_emb.emb_low @ cur_emb.emb_low.T
    return SimilarityPair(s_high, s_low)


def fuse(pair: SimilarityPair, omega: float) -> Tensor:
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if pair.S_low is None:
        fused = pair.S_high
    else:
        fused = pair.S_high * omega + pair.S_low * (1.0 - omega)
    pair.fused, pair.omega = fused, omega
    return fused


def augment(scores: Tensor, alpha) -> Tensor:
    """Append a dustbin column and row filled with `alpha`."""
    scores, alpha = tn.as_tensor(scores), tn.as_tensor(alpha)
    alpha = tn.Tensor(np.reshape(alpha.data, (1, 1))) if not alpha.requires_grad else alpha
    n_prev, n_cur = scores.shape
    col = alpha * np.ones((n_prev, 1))
    row = alpha * np.ones((1, n_cur + 1))
    return tn.concat([tn.concat([scores, col], axis=1), row], axis=0)


def marginals(n_prev: int, n_cur: int) -> tuple[np.ndarray, np.ndarray]:
    log_mu = np.concatenate([np.zeros(n_prev), [math.log(n_cur)]])
    log_nu = np.concatenate([np.zeros(n_cur), [math.log(n_prev)]])
    return log_mu, log_nu


def _trivial_assignment(n_prev: int, n_cur: int) -> np.ndarray:
    a = np.zeros((n_prev + 1, n_cur + 1))
    a[:n_prev, n_cur] = 1.0
    a[n_prev, :n_cur] = 1.0
    return a


def sinkhorn_assign(fused, alpha, iters: int) -> AssignmentMatrix:
    """Dustbin-augmented entropic assignment between N' previous and N current candidates.

    Real rows and columns are normalised to one; the dustbin row absorbs N
    units of mass and the dustbin column N'. With an empty side every real
    candidate goes to the dustbin.
    """
    fused = tn.as_tensor(fused)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(fused.data)) or not np.all(np.isfinite(tn.as_tensor(alpha).data)):
        raise ValueError("non-finite scores")
    n_prev, n_cur = fused.shape
    if n_prev == 0 or n_cur == 0:
        return AssignmentMatrix(_trivial_assignment(n_prev, n_cur), None)
    z = augment(fused, alpha)
    log_mu, log_nu = marginals(n_prev, n_cur)
    logp = tn.log_sinkhorn(z, log_mu, log_nu, iters)
    return AssignmentMatrix(np.exp(logp.data), logp)


# ---------------------------------------------------------------- decoding & loss


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_prev: list[int]
    unmatched_cur: list[int]

    def partner_prev(self, n_prev: int) -> list[int | None]:
        out: list[int | None] = [None] * n_prev
        for i, j in self.pairs:
            out[i] = j
        return out

    def partner_cur(self, n_cur: int) -> list[int | None]:
        out: list[int | None] = [None] * n_cur
        for i, j in self.pairs:
            out[j] = i
        return out


def decode_matches(A: AssignmentMatrix | np.ndarray, tau_match: float = 0.2) -> MatchResult:
    """Accept (i, j) when A[i, j] strictly dominates its full row and column and reaches tau."""
    P = A.probs if isinstance(A, AssignmentMatrix) else np.asarray(A)
    n_prev, n_cur = P.shape[0] - 1, P.shape[1] - 1
    pairs = []
    for i in range(n_prev):
        j = int(np.argmax(P[i]))
        if j >= n_cur:
            continue
        v = P[i, j]
        if v < tau_match:
            continue
        row_others = np.delete(P[i], j)
        col_others = np.delete(P[:, j], i)
        if np.all(v > row_others) and np.all(v > col_others):
            pairs.append((i, j))
    mp = {i for i, _ in pairs}
    mc = {j for _, j in pairs}
    return MatchResult(
        pairs,
        [i for i in range(n_prev) if i not in mp],
        [j for j in range(n_cur) if j not in mc],
    )


def gt_cells(prev_ids: Seq, cur_ids: Seq) -> list[tuple[int, int]]:
    """Ground-truth cells of the augmented matrix from per-candidate identities.

    Candidates with identity None never match. Identities present in both
    frames are paired; the rest go to the dustbin (row N' or column N).
    """
    n_prev, n_cur = len(prev_ids), len(cur_ids)
    cur_index = {oid: j for j, oid in enumerate(cur_ids) if oid is not None}
    cells, matched_cur = [], set()
    for i, oid in enumerate(prev_ids):
        j = cur_index.get(oid) if oid is not None else None
        if j is None:
            cells.append((i, n_cur))
        else:
            cells.append((i, j))
            matched_cur.add(j)
    for j in range(n_cur):
        if j not in matched_cur:
            cells.append((n_prev, j))
    return cells


def nll_loss(A: AssignmentMatrix, cells: Seq[tuple[int, int]]) -> Tensor:
    """Mean negative log-probability over the ground-truth cells."""
    if not cells:
        raise ValueError("no ground-truth cells")
    rows = [c[0] for c in cells]
    cols = [c[1] for c in cells]
    shape = A.probs.shape
    if min(rows) < 0 or min(cols) < 0 or max(rows) >= shape[0] or max(cols) >= shape[1]:
        raise IndexError(f"ground-truth cell outside {shape}")
    if A.log_probs is None:
        return Tensor(-np.mean(np.log(A.probs[rows, cols])))
    return tn.neg(tn.mean(tn.gather(A.log_probs, rows, cols)))


def decision_accuracy(match: MatchResult, cells: Seq[tuple[int, int]], n_prev: int, n_cur: int):
    """(correct, total) over every candidate's match-or-dustbin decision in both frames."""
    gt_prev: list[int | None] = [None] * n_prev
    gt_cur: list[int | None] = [None] * n_cur
    for i, j in cells:
        if i < n_prev and j < n_cur:
            gt_prev[i], gt_cur[j] = j, i
    pp, pc = match.partner_prev(n_prev), match.partner_cur(n_cur)
    correct = sum(a == b for a, b in zip(pp, gt_prev)) + sum(a == b for a, b in zip(pc, gt_cur))
    return correct, n_prev + n_cur


# ---------------------------------------------------------------- full pass


def forward(prev: CandidateSet, cur: CandidateSet, params: Mapping, cfg: MatcherConfig,
            iters: int | None = None) -> AssignmentMatrix:
    if len(prev) == 0 or len(cur) == 0:
        return AssignmentMatrix(_trivial_assignment(len(prev), len(cur)), None)
    e_prev = encode(prev, params, cfg)
    e_cur = encode(cur, params, cfg)
    h_prev, h_cur = embed(e_prev, e_cur, params, cfg)
    pair = similarity(h_prev, h_cur)
    fused = fuse(pair, cfg.omega)
    return sinkhorn_assign(fused, params["alpha"], iters or cfg.iters_infer)


def match(prev: CandidateSet, cur: CandidateSet, params: Mapping, cfg: MatcherConfig):
    with tn.no_grad():
        A = forward(prev, cur, params, cfg, cfg.iters_infer)
    return A, decode_matches(A, cfg.tau_match)


# ---------------------------------------------------------------- training


@dataclass
class PairSample:
    prev: CandidateSet
    cur: CandidateSet
    cells: list[tuple[int, int]]

    @classmethod
    def from_sets(cls, prev: CandidateSet, cur: CandidateSet) -> "PairSample":
        return cls(prev, cur, gt_cells(prev.object_ids, cur.object_ids))

    @property
    def trainable(self) -> bool:
        return len(self.prev) > 0 and len(self.cur) > 0


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def pair_loss(sample: PairSample, leaves: Mapping, cfg: MatcherConfig) -> Tensor:
    A = forward(sample.prev, sample.cur, leaves, cfg, cfg.iters_train)
    return nll_loss(A, sample.cells)


def batch_loss(samples: Seq[PairSample], leaves: Mapping, cfg: MatcherConfig) -> Tensor:
    losses = [pair_loss(s, leaves, cfg) for s in samples]
    tot = losses[0]
    for l in losses[1:]:
        tot = tot + l
    return tot * (1.0 / len(losses))


def _used_names(params: Mapping, cfg: MatcherConfig) -> list[str]:
    if cfg.branches == "high":
        return [k for k in params if not k.startswith("low.")]
    return list(params)


def train_matcher(samples: Seq[PairSample], cfg: MatcherConfig, tcfg: TrainConfig,
                  params: Mapping | None = None, log=None):
    """Adam on the mean assignment NLL; returns (params, per-step losses)."""
    pool = [s for s in samples if s.trainable]
    if not pool:
        raise ValueError("empty training set")
    params = {k: np.array(v) for k, v in (params or init_params(cfg, tcfg.seed)).items()}
    state = tn.AdamState.zeros(params)
    rng = np.random.default_rng([tcfg.seed, 1])
    names = _used_names(params, cfg)
    history = []
    for step in range(tcfg.steps):
        idx = rng.integers(0, len(pool), size=min(tcfg.batch_size, len(pool)))
        leaves = {k: tn.param(params[k]) for k in names}
        loss = batch_loss([pool[i] for i in idx], leaves, cfg)
        tn.backward(loss)
        grads = {k: leaves[k].grad for k in names if leaves[k].grad is not None}
        params, state = tn.adam_step(params, grads, state, tcfg.lr, tcfg.betas, tcfg.eps)
        history.append(float(loss.data))
        if log is not None and (step % 50 == 0 or step == tcfg.steps - 1):
            log(step, history[-1])
    return params, history


def evaluate_association(samples: Seq[PairSample], params: Mapping, cfg: MatcherConfig) -> float:
    correct = total = 0
    for s in samples:
        if len(s.prev) + len(s.cur) == 0:
            continue
        _, m = match(s.prev, s.cur, params, cfg)
        c, t = decision_accuracy(m, s.cells, len(s.prev), len(s.cur))
        correct += c
        total += t
    return correct / total if total else 1.0


def checkpoint_header(cfg: MatcherConfig, extra: Mapping | None = None) -> dict:
    head = {"format": "sfmtrack-matcher/1", "matcher": cfg.to_dict()}
    if extra:
        head.update(extra)
    return head


def save_matcher(path, params: Mapping, cfg: MatcherConfig, extra: Mapping | None = None) -> None:
    tn.save_checkpoint(path, params, checkpoint_header(cfg, extra))


def load_matcher(path) -> tuple[dict, MatcherConfig, dict]:
    header, params = tn.load_checkpoint(path)
    mc = dict(header["matcher"])
    mc["image_size"] = tuple(mc["image_size"])
    return params, MatcherConfig(**mc), header
