import json
import random

import pytest
from hypothesis import given, strategies as st

from sfmtrack import metrics
from sfmtrack.dataset import DatasetError, FrameAnnotation, Sequence
from sfmtrack.geometry import BBox
from sfmtrack.metrics import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    Curve,
    EvalResult,
    attribute_breakdown,
    auc,
    evaluate,
    precision_curve,
    prc,
    rank,
    score_sequence,
    success_curve,
    success_rate_at_half,
)

import oracles
from conftest import random_fixture, static_sequence


def seq_of(boxes, name="s", attrs=frozenset()):
    return Sequence(name, "c", [FrameAnnotation.present(b) if b else FrameAnnotation.missing() for b in boxes], attrs)


def shifted(b, dx):
    return b.translated(dx, 0)


B = BBox(100, 100, 10, 10)


def test_threshold_grids():
    assert PRECISION_THRESHOLDS == tuple(float(t) for t in range(51))
    assert len(SUCCESS_THRESHOLDS) == 21 and SUCCESS_THRESHOLDS[0] == 0.0 and SUCCESS_THRESHOLDS[-1] == 1.0


def test_perfect_precision():
    s = seq_of([B, B.translated(5, 5)])
    assert set(precision_curve(s, s.boxes).values) == {1.0}


def test_precision_ten_and_thirty_px():
    s = seq_of([B, B])
    c = precision_curve(s, [shifted(B, 10), shifted(B, 30)])
    assert c.value_at(20.0) == 0.5
    assert prc(c) == 0.5
    assert c.value_at(10.0) == 0.5 and c.value_at(9.0) == 0.0 and c.value_at(30.0) == 1.0


def test_single_evaluated_frame():
    s = seq_of([B, None, None])
    c = precision_curve(s, [B, BBox(0, 0, 1, 1), BBox(0, 0, 1, 1)])
    assert set(c.values) == {1.0}


def test_prc_trivial_curves():
    ones = Curve(PRECISION_THRESHOLDS, (1.0,) * 51)
    zeros = Curve(PRECISION_THRESHOLDS, (0.0,) * 51)
    assert prc(ones) == 1.0 and prc(zeros) == 0.0
    with pytest.raises(KeyError):
        prc(Curve((0.0, 10.0), (1.0, 1.0)))


def test_success_one_hit_one_miss():
    s = seq_of([B, B])
    c = success_curve(s, [B, shifted(B, 50)])
    assert c.values[:20] == (0.5,) * 20 and c.values[20] == 0.0
    assert auc(c) == pytest.approx(20 * 0.5 / 21, abs=1e-15)
    assert success_rate_at_half(s, [B, shifted(B, 50)]) == 0.5


def test_success_identical_boxes():
    s = seq_of([B, B.translated(3, 1)])
    c = success_curve(s, s.boxes)
    assert c.values == (1.0,) * 20 + (0.0,)
    assert auc(c) == pytest.approx(20 / 21, abs=1e-15)
    assert success_rate_at_half(s, s.boxes) == 1.0


def test_success_zero_overlap():
    s = seq_of([B])
    c = success_curve(s, [shifted(B, 30)])
    assert set(c.values) == {0.0} and auc(c) == 0.0


def test_success_at_half_is_strict():
    # width 10 vs shifted by 10/3 -> overlap 20/3 * 10, union 40/3 * 10 -> IoU exactly 0.5
    a, b = BBox(0, 0, 12, 10), BBox(4, 0, 12, 10)
    from sfmtrack.geometry import iou
    assert iou(a, b) == 0.5
    assert success_rate_at_half(seq_of([a, a]), [b, b]) == 0.0


def test_length_mismatch_errors():
    s = seq_of([B, B])
    for fn in (precision_curve, success_curve, success_rate_at_half):
        with pytest.raises(DatasetError):
            fn(s, [B])


def test_curve_validation():
    with pytest.raises(ValueError):
        Curve((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        Curve((0.0, 1.0), (1.0, 1.5))


def test_evaluate_single_sequence_aggregate():
    s = seq_of([B, B, B])
    preds = [B, shifted(B, 4), shifted(B, 40)]
    ev = evaluate([s], {"s": preds})
    assert ev.aggregate == ev.per_sequence["s"]
    assert ev.evaluated_frames == 3


def test_evaluate_mean_of_sequences():
    a, b = seq_of([B], "a"), seq_of([B], "b")
    ev = evaluate([a, b], {"a": [B], "b": [shifted(B, 100)]})
    assert ev.per_sequence["a"].prc == 1.0 and ev.per_sequence["b"].prc == 0.0
    assert ev.prc == 0.5


def test_evaluate_missing_sequence():
    with pytest.raises(DatasetError):
        evaluate([seq_of([B], "a")], {})
    with pytest.raises(DatasetError):
        evaluate([seq_of([B], "a")], {"a": [B, B]})


@pytest.mark.parametrize("seed", range(5))
def test_evaluate_matches_oracle(seed):
    rng = random.Random(seed)
    seqs, results = [], {}
    for i in range(5):
        s, p = random_fixture(rng, f"seq{i}")
        seqs.append(s)
        results[s.name] = p
    ev = evaluate(seqs, results)
    per, agg = oracles.dataset_scores(seqs, results)
    for name, (p, a, h) in per.items():
        got = ev.per_sequence[name]
        assert (got.prc, got.auc, got.success_at_half) == (p, a, h)
    assert (ev.prc, ev.auc, ev.aggregate.success_at_half) == agg


def test_absent_frames_never_counted():
    rng = random.Random(3)
    s, p = random_fixture(rng, "a", 20, p_absent=0.0)
    base = score_sequence(s, p)
    frames, preds = [], []
    for f, q in zip(s.frames, p):
        frames += [f, FrameAnnotation.missing()]
        preds += [q, BBox(rng.uniform(-1e4, 1e4), 0, 1, 1)]
    padded = score_sequence(Sequence("a", "c", frames), preds)
    assert (padded.prc, padded.auc, padded.success_at_half) == (base.prc, base.auc, base.success_at_half)
    assert padded.precision == base.precision and padded.success == base.success


def test_breakdown_all_fm_equals_overall():
    seqs = [seq_of([B, B], f"s{i}", frozenset({"FM"})) for i in range(3)]
    res = {s.name: [B, shifted(B, 7 * i)] for i, s in enumerate(seqs)}
    ev = evaluate(seqs, res)
    assert attribute_breakdown(ev, seqs)["FM"].aggregate == ev.aggregate


def test_breakdown_single_carrier_and_disjoint():
    seqs = [seq_of([B, B], "a", frozenset({"IV"})), seq_of([B, B], "b", frozenset({"MB"})),
            seq_of([B, B], "c", frozenset({"MB"}))]
    res = {"a": [B, shifted(B, 25)], "b": [B, B], "c": [B, shifted(B, 3)]}
    ev = evaluate(seqs, res)
    br = attribute_breakdown(ev, seqs)
    assert br["IV"].aggregate == ev.per_sequence["a"]
    mb = [s for s in seqs if "MB" in s.attributes]
    assert br["MB"].aggregate == evaluate(mb, {s.name: res[s.name] for s in mb}).aggregate
    assert "ROT" not in br


def _fake(auc_value):
    c = Curve(SUCCESS_THRESHOLDS, (auc_value,) * 21)
    p = Curve(PRECISION_THRESHOLDS, (auc_value,) * 51)
    sc = metrics.SequenceScore(auc_value, auc_value, auc_value, p, c, 1)
    return EvalResult({"s": sc}, sc)


def test_rank():
    assert rank({"A": _fake(0.2)}) == ["A"]
    assert rank({"A": _fake(0.2), "B": _fake(0.3)}, "auc") == ["B", "A"]
    assert rank({"Z": _fake(0.25), "A": _fake(0.25), "M": _fake(0.25)}) == ["A", "M", "Z"]
    assert rank({"A": _fake(0.2), "B": _fake(0.3)}, "prc") == ["B", "A"]


def test_eval_result_json_round_trip():
    rng = random.Random(8)
    seqs, res = zip(*[random_fixture(rng, f"s{i}") for i in range(3)])
    ev = evaluate(list(seqs), {s.name: p for s, p in zip(seqs, res)})
    back = EvalResult.from_dict(json.loads(ev.to_json()))
    assert back == ev


@given(st.integers(0, 10**6))
def test_curve_monotonicity_and_auc_bounds(seed):
    s, p = random_fixture(random.Random(seed), "m")
    pc, sc = precision_curve(s, p), success_curve(s, p)
    assert all(a <= b for a, b in zip(pc.values, pc.values[1:]))
    assert all(a >= b for a, b in zip(sc.values, sc.values[1:]))
    assert min(sc.values) <= auc(sc) <= max(sc.values)


@given(st.integers(0, 10**6))
def test_ground_truth_as_prediction(seed):
    s, _ = random_fixture(random.Random(seed), "g")
    sc = score_sequence(s, [f.box or BBox(0, 0, 1, 1) for f in s.frames])
    assert sc.prc == 1.0
    assert sc.auc == pytest.approx(20 / 21, abs=1e-12)
    assert sc.success.values[:20] == (1.0,) * 20
