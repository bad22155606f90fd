"""Online tracking loop on top of the candidate matcher.

Per frame: extract candidates from the score map, match them against the
previous frame's candidates, update the database of visible objects and pick
the target. The reported box keeps the initial extent (times the per-frame
scale supplied with the sequence) centred on the chosen candidate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import matcher as mt
from .geometry import BBox, Point, center
from .matcher import Candidate, CandidateSet, MatchResult, MatcherConfig, PairSample
from .sim import ScoreMap, SimSequence


class TrackerError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    tau_cand_rel: float = 0.05
    tau_cand_floor: float = 0.1
    nms_size: int = 5
    n_max: int = 16
    tau_new: float = 0.25
    tau_redetect: float = 0.25
    delta: float = 0.05
    # pixels; how far a peak may be from a feature-table entry to inherit it
    feature_radius: float = 8.0
    memory_beta: float = 0.5
    subcell: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrackedObject:
    id: int
    last_candidate: Candidate
    cand_index: int
    last_seen_frame: int
    is_target: bool = False
    # appearance record, refreshed only while the target is confidently held
    appearance: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class ObjectDatabase:
    objects: dict[int, TrackedObject]
    next_id: int
    target_confidence: float
    target_box: BBox
    box_size: tuple[float, float]
    frame: int = 0

    @property
    def target(self) -> TrackedObject | None:
        for o in self.objects.values():
            if o.is_target:
                return o
        return None

    def check(self) -> None:
        if sum(o.is_target for o in self.objects.values()) > 1:
            raise AssertionError("more than one object marked as target")
        if self.objects and max(self.objects) >= self.next_id:
            raise AssertionError("object id not below the id counter")


# ---------------------------------------------------------------- candidates


def _threshold(values: np.ndarray, cfg: TrackerConfig) -> float:
    return max(cfg.tau_cand_rel * float(values.max()), cfg.tau_cand_floor)


def find_peaks(smap: ScoreMap, cfg: TrackerConfig = TrackerConfig()) -> list[tuple[int, int]]:
    """Greedy non-maximum suppression over an nms_size window, highest first.

    Ties are broken by raster order so plateaus yield a single peak.
    """
    vals = np.asarray(smap.values, dtype=np.float64)
    if vals.size == 0:
        return []
    thr = _threshold(vals, cfg)
    rr, cc = np.nonzero(vals >= thr)
    order = np.lexsort((cc, rr, -vals[rr, cc]))
    half = cfg.nms_size // 2
    suppressed = np.zeros(vals.shape, dtype=bool)
    peaks = []
    for k in order:
        r, c = int(rr[k]), int(cc[k])
        if suppressed[r, c]:
            continue
        peaks.append((r, c))
        suppressed[max(0, r - half) : r + half + 1, max(0, c - half) : c + half + 1] = True
        if len(peaks) >= cfg.n_max:
            break
    return peaks


def _offset(lo: float, mid: float, hi: float) -> float:
    """Vertex of the parabola through three samples, in cells, clamped to +-0.5.

    Uses log values when all are positive, which is exact for a Gaussian bump.
    """
    if lo > 0 and mid > 0 and hi > 0:
        lo, mid, hi = np.log(lo), np.log(mid), np.log(hi)
    den = lo - 2 * mid + hi
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))


def refine_peak(values: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """Sub-cell (row, col) of a local maximum; borders fall back to the cell centre."""
    h, w = values.shape
    dr = _offset(values[r - 1, c], values[r, c], values[r + 1, c]) if 0 < r < h - 1 else 0.0
    dc = _offset(values[r, c - 1], values[r, c], values[r, c + 1]) if 0 < c < w - 1 else 0.0
    return r + dr, c + dc


def extract_candidates(smap: ScoreMap, frame_features: CandidateSet | None,
                       cfg: TrackerConfig = TrackerConfig(), width: int | None = None) -> CandidateSet:
    """Peaks of the score map, each pulling the nearest feature-table entry.

    Peaks with no table entry within `feature_radius` get zero features and no
    identity. When two peaks pull the same entry only the nearer keeps its id.
    """
    if width is None:
        width = frame_features.feat_high.shape[1] if frame_features is not None else 0
    peaks = find_peaks(smap, cfg)
    if not peaks:
        return CandidateSet.empty(width)
    s = smap.stride
    vals = np.asarray(smap.values, dtype=np.float64)
    cells = [refine_peak(vals, r, c) if cfg.subcell else (r, c) for r, c in peaks]
    pos = np.array([[(c + 0.5) * s, (r + 0.5) * s] for r, c in cells])
    scores = np.array([float(np.clip(smap.values[r, c], 0.0, 1.0)) for r, c in peaks])
    hi = np.zeros((len(peaks), width))
    lo = np.zeros((len(peaks), width))
    ids: list = [None] * len(peaks)
    if frame_features is not None and len(frame_features):
        dist = np.linalg.norm(pos[:, None, :] - frame_features.positions[None, :, :], axis=2)
        owner: dict[int, int] = {}
        for i in range(len(peaks)):
            e = int(np.argmin(dist[i]))
            if dist[i, e] > cfg.feature_radius:
                continue
            hi[i], lo[i] = frame_features.feat_high[e], frame_features.feat_low[e]
            oid = frame_features.object_ids[e]
            prev = owner.get(e)
            if prev is None:
                owner[e], ids[i] = i, oid
            elif dist[i, e] < dist[prev, e]:
                ids[prev] = None
                owner[e], ids[i] = i, oid
    return CandidateSet(pos, scores, hi, lo, ids)


# ---------------------------------------------------------------- database


def _box_at(p: Point | np.ndarray, size: tuple[float, float], scale: float = 1.0) -> BBox:
    x, y = (p.x, p.y) if isinstance(p, Point) else (float(p[0]), float(p[1]))
    return BBox.from_center(x, y, size[0] * scale, size[1] * scale)


def init(first_gt: BBox | None, first_set: CandidateSet, cfg: TrackerConfig = TrackerConfig()):
    """Seed the database from the first-frame box; returns (db, candidate set for frame 0).

    The candidate nearest the box centre (within half the box diagonal plus the
    feature radius) becomes the target; otherwise a synthetic candidate is
    appended at the box centre with score 1.
    """
    if first_gt is None:
        raise TrackerError("the first frame must carry a ground-truth box")
    c = center(first_gt)
    reach = 0.5 * float(np.hypot(first_gt.w, first_gt.h)) + cfg.feature_radius
    tidx = None
    if len(first_set):
        d = np.hypot(first_set.positions[:, 0] - c.x, first_set.positions[:, 1] - c.y)
        k = int(np.argmin(d))
        if d[k] <= reach:
            tidx = k
    cset = first_set
    if tidx is None:
        width = first_set.feat_high.shape[1]
        cset = first_set.with_appended(Candidate(c, 1.0, np.zeros(width), np.zeros(width), None))
        tidx = len(cset) - 1
    objects, nid = {}, 0
    for i, cand in enumerate(cset):
        if i != tidx and cand.score < cfg.tau_new:
            continue
        is_t = i == tidx
        objects[nid] = TrackedObject(nid, cand, i, 0, is_t, (cand.feat_low, cand.feat_high) if is_t else None)
        nid += 1
    db = ObjectDatabase(objects, nid, 1.0, first_gt, (first_gt.w, first_gt.h), 0)
    return db, cset


def associate(db: ObjectDatabase, match: MatchResult, prev_set: CandidateSet, cur_set: CandidateSet,
              frame_index: int, cfg: TrackerConfig = TrackerConfig()) -> ObjectDatabase:
    """Carry matched objects forward, drop the unmatched ones, register newcomers."""
    n_prev, n_cur = len(prev_set), len(cur_set)
    for i, j in match.pairs:
        if not (0 <= i < n_prev and 0 <= j < n_cur):
            raise IndexError(f"match ({i}, {j}) outside {n_prev}x{n_cur}")
    partner = match.partner_prev(n_prev)
    objects: dict[int, TrackedObject] = {}
    owned = set()
    for oid, obj in db.objects.items():
        j = partner[obj.cand_index] if obj.cand_index < n_prev else None
        if j is None:
            continue
        objects[oid] = TrackedObject(oid, cur_set[j], j, frame_index, obj.is_target, obj.appearance)
        owned.add(j)
    nid = db.next_id
    for j in range(n_cur):
        if j in owned or cur_set.scores[j] < cfg.tau_new:
            continue
        objects[nid] = TrackedObject(nid, cur_set[j], j, frame_index, False)
        nid += 1
    out = ObjectDatabase(objects, nid, db.target_confidence, db.target_box, db.box_size, frame_index)
    return out


def select_target(db: ObjectDatabase, cur_set: CandidateSet, cfg: TrackerConfig = TrackerConfig(),
                  scale: float = 1.0) -> tuple[BBox, float]:
    """Report the target box and its confidence, updating `db` in place."""
    tgt = db.target
    if tgt is not None:
        beta = float(np.clip(tgt.last_candidate.score, 0.0, 1.0))
        box = _box_at(tgt.last_candidate.position, db.box_size, scale)
        if beta >= cfg.memory_beta:
            tgt.appearance = (tgt.last_candidate.feat_low, tgt.last_candidate.feat_high)
    else:
        box, beta = db.target_box, 0.0
        if len(cur_set):
            order = np.argsort(-cur_set.scores, kind="stable")
            best = float(cur_set.scores[order[0]])
            runner = float(cur_set.scores[order[1]]) if len(order) > 1 else -np.inf
            if best >= cfg.tau_redetect and best - runner >= cfg.delta:
                j = int(order[0])
                owner = next((o for o in db.objects.values() if o.cand_index == j), None)
                if owner is None:
                    owner = TrackedObject(db.next_id, cur_set[j], j, db.frame)
                    db.objects[owner.id] = owner
                    db.next_id += 1
                owner.is_target = True
                beta = 0.5 * best
                box = _box_at(owner.last_candidate.position, db.box_size, scale)
    db.target_confidence, db.target_box = beta, box
    return box, beta


# ---------------------------------------------------------------- sequences


def frame_candidates(seq: SimSequence, t: int, cfg: TrackerConfig = TrackerConfig()) -> CandidateSet:
    return extract_candidates(seq.score_map(t), seq.tables[t], cfg, seq.config.feature_width)


def run_sequence(seq: SimSequence, params: Mapping, mcfg: MatcherConfig,
                 cfg: TrackerConfig = TrackerConfig()) -> tuple[list[BBox], list[float]]:
    """Track from the first-frame box; returns one box and one confidence per frame."""
    if seq.num_frames != len(seq.sequence) or seq.score_maps.shape[0] != seq.num_frames:
        raise TrackerError(f"{seq.name}: inconsistent sequence data")
    first = seq.sequence.frames[0].box
    db, prev_set = init(first, frame_candidates(seq, 0, cfg), cfg)
    boxes, betas = [first], [1.0]
    for t in range(1, seq.num_frames):
        cur_set = frame_candidates(seq, t, cfg)
        _, m = mt.match(prev_set, cur_set, params, mcfg)
        db = associate(db, m, prev_set, cur_set, t, cfg)
        box, beta = select_target(db, cur_set, cfg, seq.scales[t] if seq.scales else 1.0)
        db.check()
        boxes.append(box)
        betas.append(beta)
        prev_set = cur_set
    return boxes, betas


def training_pairs(seq: SimSequence, cfg: TrackerConfig = TrackerConfig()) -> list[PairSample]:
    """Consecutive-frame candidate sets labelled by object identity."""
    sets = [frame_candidates(seq, t, cfg) for t in range(seq.num_frames)]
    return [PairSample.from_sets(a, b) for a, b in zip(sets, sets[1:])]
