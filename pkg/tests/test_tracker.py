from dataclasses import replace

import numpy as np
import pytest

from sfmtrack import matcher as mt
from sfmtrack import pipeline
from sfmtrack import tracker as tk
from sfmtrack.geometry import BBox, Point, center
from sfmtrack.matcher import Candidate, CandidateSet, MatchResult, MatcherConfig
from sfmtrack.sim import ScoreMap, SimConfig, gen_sequence
from sfmtrack.tracker import TrackerConfig

CFG = TrackerConfig()


def bump_map(centres, grid=32, stride=4, sigma=5.0, height=1.0):
    cells = (np.arange(grid) + 0.5) * stride
    out = np.zeros((grid, grid))
    for cx, cy in centres:
        out += height * np.outer(np.exp(-(cells - cy) ** 2 / (2 * sigma**2)), np.exp(-(cells - cx) ** 2 / (2 * sigma**2)))
    return ScoreMap(out, stride)


def cset(points, scores, ids=None, width=4, feats=None):
    n = len(points)
    f = np.zeros((n, width)) if feats is None else feats
    return CandidateSet(np.array(points, dtype=float).reshape(n, 2), np.array(scores, dtype=float), f, f, ids or [])


# ---------------------------------------------------------------- candidates


def test_single_bump_gives_one_candidate_in_peak_cell():
    smap = bump_map([(50.0, 70.0)])
    c = tk.extract_candidates(smap, None, CFG, width=4)
    assert len(c) == 1
    r, col = np.unravel_index(np.argmax(smap.values), smap.values.shape)
    x, y = c.positions[0]
    assert int(x // 4) == col and int(y // 4) == r
    assert np.allclose(c.positions[0], [50.0, 70.0], atol=1e-6)


def test_grid_aligned_peak_without_refinement():
    c = tk.extract_candidates(bump_map([(50.0, 70.0)]), None, replace(CFG, subcell=False), width=4)
    assert c.positions.tolist() == [[50.0, 70.0]]


def test_low_map_gives_empty_set():
    smap = bump_map([(50.0, 70.0)], height=0.09)
    assert len(tk.extract_candidates(smap, None, CFG, width=4)) == 0
    assert len(tk.extract_candidates(ScoreMap(np.zeros((8, 8)), 4), None, CFG, width=4)) == 0


def test_two_separated_bumps():
    # 10 cells apart along x
    c = tk.extract_candidates(bump_map([(30.0, 62.0), (70.0, 62.0)]), None, CFG, width=4)
    assert len(c) == 2
    assert sorted(np.round(c.positions[:, 0], 6).tolist()) == [30.0, 70.0]


def test_nms_plateau_and_cap():
    vals = np.zeros((10, 10))
    vals[4, 4] = vals[4, 5] = 1.0
    assert tk.find_peaks(ScoreMap(vals, 1.0), CFG) == [(4, 4)]
    spikes = np.zeros((30, 30))
    for k in range(9):
        spikes[3 * (k // 3) * 3 + 2, 3 * (k % 3) * 3 + 2] = 0.2 + 0.05 * k
    peaks = tk.find_peaks(ScoreMap(spikes, 1.0), replace(CFG, n_max=4))
    assert len(peaks) == 4
    assert [spikes[p] for p in peaks] == sorted((spikes[p] for p in peaks), reverse=True)


def test_features_pulled_from_nearest_table_entry():
    table = cset([(30.0, 62.0), (90.0, 20.0)], [1, 1], ids=[5, 9], feats=np.array([[1.0] * 4, [2.0] * 4]))
    c = tk.extract_candidates(bump_map([(31.0, 61.0), (70.0, 62.0)]), table, CFG)
    by_x = np.argsort(c.positions[:, 0])
    assert c.object_ids[by_x[0]] == 5 and c.feat_high[by_x[0]].tolist() == [1.0] * 4
    assert c.object_ids[by_x[1]] is None and not c.feat_high[by_x[1]].any()


# ---------------------------------------------------------------- database


def snapshot(db):
    objs = [(o.id, o.cand_index, o.is_target, o.last_candidate.position, o.last_candidate.score,
             o.last_candidate.feat_high.tobytes()) for o in db.objects.values()]
    return objs, db.next_id, db.target_box, db.target_confidence


def test_init_and_immediate_query():
    box = BBox(45, 65, 10, 10)
    first = cset([(50.0, 70.0), (100.0, 100.0)], [0.9, 0.8])
    db, s = tk.init(box, first, CFG)
    assert db.target_box == box and db.target_confidence == 1.0
    assert db.target.cand_index == 0
    db2, _ = tk.init(box, first, CFG)
    assert snapshot(db) == snapshot(db2)


def test_init_without_candidates():
    box = BBox(45, 65, 10, 10)
    db, s = tk.init(box, CandidateSet.empty(4), CFG)
    assert len(s) == 1 and s[0].position == center(box)
    assert db.target.cand_index == 0 and db.target_box == box
    with pytest.raises(tk.TrackerError):
        tk.init(None, CandidateSet.empty(4), CFG)


def _one_object_db():
    return tk.init(BBox(45, 65, 10, 10), cset([(50.0, 70.0)], [0.9]), CFG)


def test_associate_matched_object_keeps_id():
    db, prev = _one_object_db()
    cur = cset([(55.0, 72.0)], [0.85])
    db2 = tk.associate(db, MatchResult([(0, 0)], [], []), prev, cur, 1, CFG)
    assert list(db2.objects) == [0]
    assert db2.objects[0].last_candidate.position == Point(55.0, 72.0) and db2.objects[0].last_seen_frame == 1


def test_associate_unmatched_drops_and_creates():
    db, prev = _one_object_db()
    cur = cset([(10.0, 10.0)], [0.8])
    db2 = tk.associate(db, MatchResult([], [0], [0]), prev, cur, 1, CFG)
    assert list(db2.objects) == [1] and db2.next_id == 2 and not db2.objects[1].is_target


def test_associate_low_score_newcomer_ignored():
    db, prev = _one_object_db()
    db2 = tk.associate(db, MatchResult([], [0], [0]), prev, cset([(10.0, 10.0)], [0.2]), 1, CFG)
    assert db2.objects == {} and db2.next_id == db.next_id


def test_associate_rejects_bad_indices():
    db, prev = _one_object_db()
    with pytest.raises(IndexError):
        tk.associate(db, MatchResult([(0, 3)], [], []), prev, cset([(1.0, 1.0)], [0.5]), 1, CFG)


def test_select_matched_target():
    db, prev = _one_object_db()
    cur = cset([(55.0, 72.0)], [0.9])
    db = tk.associate(db, MatchResult([(0, 0)], [], []), prev, cur, 1, CFG)
    box, beta = tk.select_target(db, cur, CFG)
    assert beta == 0.9 and center(box) == Point(55.0, 72.0) and (box.w, box.h) == (10, 10)


def test_select_lost_target_with_empty_set():
    db, prev = _one_object_db()
    empty = CandidateSet.empty(4)
    db = tk.associate(db, MatchResult([], [0], []), prev, empty, 1, CFG)
    box, beta = tk.select_target(db, empty, CFG)
    assert beta == 0.0 and box == BBox(45, 65, 10, 10)


def test_no_redetection_when_ambiguous():
    db, prev = _one_object_db()
    cur = cset([(10.0, 10.0), (100.0, 100.0)], [0.80, 0.78])
    db = tk.associate(db, MatchResult([], [0], [0, 1]), prev, cur, 1, CFG)
    box, beta = tk.select_target(db, cur, CFG)
    assert beta == 0.0 and db.target is None


def test_redetection_of_clear_winner():
    db, prev = _one_object_db()
    cur = cset([(10.0, 10.0), (100.0, 100.0)], [0.8, 0.3])
    db = tk.associate(db, MatchResult([], [0], [0, 1]), prev, cur, 1, CFG)
    box, beta = tk.select_target(db, cur, CFG)
    assert beta == 0.4 and center(box) == Point(10.0, 10.0) and db.target.cand_index == 0


def test_appearance_record_only_updates_when_confident():
    feats = np.ones((1, 4))
    db, prev = tk.init(BBox(45, 65, 10, 10), cset([(50.0, 70.0)], [0.9], feats=feats), CFG)
    weak = cset([(52.0, 70.0)], [0.3], feats=2 * feats)
    db = tk.associate(db, MatchResult([(0, 0)], [], []), prev, weak, 1, CFG)
    tk.select_target(db, weak, CFG)
    assert db.target.appearance[0].tolist() == [1.0] * 4
    strong = cset([(54.0, 70.0)], [0.7], feats=3 * feats)
    db = tk.associate(db, MatchResult([(0, 0)], [], []), weak, strong, 2, CFG)
    tk.select_target(db, strong, CFG)
    assert db.target.appearance[0].tolist() == [3.0] * 4


# ---------------------------------------------------------------- sequences


@pytest.fixture(scope="module")
def clean_matcher():
    """A small matcher trained on distractor-free sequences."""
    base = SimConfig(num_distractors=0, num_frames=40, feature_width=8, distractor_spawn_rate=0.0)
    seqs = [gen_sequence(replace(base, seed=100 + i), f"t{i}") for i in range(4)]
    cfg = MatcherConfig(d=8, raw_width=8)
    params, _ = mt.train_matcher(pipeline.collect_pairs(seqs), cfg, mt.TrainConfig(steps=60, batch_size=4))
    return params, cfg, base


def test_clean_sequence_stays_on_target(clean_matcher):
    params, cfg, base = clean_matcher
    for seed in range(3):
        s = gen_sequence(replace(base, seed=seed, noise_sigma=0.0), f"c{seed}")
        boxes, betas = tk.run_sequence(s, params, cfg)
        for b, gt in zip(boxes, s.sequence.boxes):
            ce, cg = center(b), center(gt)
            assert max(abs(ce.x - cg.x), abs(ce.y - cg.y)) <= base.stride
        assert all(0.0 <= v <= 1.0 for v in betas)


def test_single_frame_sequence(clean_matcher):
    params, cfg, base = clean_matcher
    s = gen_sequence(replace(base, num_frames=1), "one")
    boxes, betas = tk.run_sequence(s, params, cfg)
    assert boxes == [s.sequence.frames[0].box] and betas == [1.0]


def test_run_invariants_and_determinism():
    cfg = MatcherConfig(d=8, raw_width=8)
    params = mt.init_params(cfg, 0)
    s = gen_sequence(SimConfig(feature_width=8, seed=3, num_frames=40, occlusion_probability=0.1,
                               distractor_spawn_rate=0.1), "inv")
    a = tk.run_sequence(s, params, cfg)
    assert a == tk.run_sequence(s, params, cfg)
    boxes, betas = a
    assert len(boxes) == len(betas) == s.num_frames
    assert all(0.0 <= v <= 1.0 for v in betas)
    assert all((b.w, b.h) == (10.0, 10.0) for b in boxes)


def test_database_invariants_along_a_run():
    cfg = MatcherConfig(d=8, raw_width=8)
    params = mt.init_params(cfg, 1)
    s = gen_sequence(SimConfig(feature_width=8, seed=4, num_frames=40, distractor_spawn_rate=0.1), "db")
    db, prev = tk.init(s.sequence.frames[0].box, tk.frame_candidates(s, 0), CFG)
    seen_ids, last_next = set(db.objects), db.next_id
    for t in range(1, s.num_frames):
        cur = tk.frame_candidates(s, t)
        _, m = mt.match(prev, cur, params, cfg)
        db = tk.associate(db, m, prev, cur, t, CFG)
        tk.select_target(db, cur, CFG)
        assert sum(o.is_target for o in db.objects.values()) <= 1
        assert db.next_id >= last_next
        new = set(db.objects) - seen_ids
        assert all(i >= last_next for i in new)
        seen_ids |= new
        last_next = db.next_id
        prev = cur


def test_omega_one_run_matches_high_only():
    cfg = MatcherConfig(d=8, raw_width=8, omega=1.0)
    params = mt.init_params(cfg, 2)
    high = {k: v for k, v in params.items() if not k.startswith("low.")}
    s = gen_sequence(SimConfig(feature_width=8, seed=5, num_frames=30), "red")
    assert tk.run_sequence(s, params, cfg) == tk.run_sequence(s, high, replace(cfg, branches="high"))
