"""One-pass evaluation: precision and success curves, PRC, AUC and rankings.

Frames whose ground truth is absent are excluded from every denominator. The
success curve counts frames with IoU strictly greater than the threshold, at
every threshold including 0 and 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence as Seq

import numpy as np

from .dataset import ATTRIBUTES, DatasetError, Sequence
from .geometry import BBox, center_error, iou

PRECISION_THRESHOLDS = tuple(float(t) for t in range(0, 51))
SUCCESS_THRESHOLDS = tuple(i / 20 for i in range(21))
PRC_THRESHOLD = 20.0


@dataclass(frozen=True)
class Curve:
    thresholds: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.thresholds) != len(self.values):
            raise ValueError("thresholds and values differ in length")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("curve values must lie in [0, 1]")

    def value_at(self, t: float) -> float:
        try:
            return self.values[self.thresholds.index(t)]
        except ValueError:
            raise KeyError(f"threshold {t} not sampled") from None

    def to_csv(self) -> str:
        return "".join(f"{t!r},{v!r}\n" for t, v in zip(self.thresholds, self.values))

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Curve":
        return cls(tuple(float(t) for t in d["thresholds"]), tuple(float(v) for v in d["values"]))


@dataclass(frozen=True)
class SequenceScore:
    prc: float
    auc: float
    success_at_half: float
    precision: Curve
    success: Curve
    evaluated_frames: int

    def to_dict(self) -> dict:
        return {
            "prc": self.prc,
            "auc": self.auc,
            "success_at_half": self.success_at_half,
            "evaluated_frames": self.evaluated_frames,
            "precision_curve": self.precision.to_dict(),
            "success_curve": self.success.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SequenceScore":
        return cls(
            float(d["prc"]),
            float(d["auc"]),
            float(d["success_at_half"]),
            Curve.from_dict(d["precision_curve"]),
            Curve.from_dict(d["success_curve"]),
            int(d["evaluated_frames"]),
        )


@dataclass(frozen=True)
class EvalResult:
    per_sequence: dict[str, SequenceScore]
    aggregate: SequenceScore = field(repr=False)

    @property
    def prc(self) -> float:
        return self.aggregate.prc

    @property
    def auc(self) -> float:
        return self.aggregate.auc

    @property
    def evaluated_frames(self) -> int:
        return self.aggregate.evaluated_frames

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "per_sequence": {k: self.per_sequence[k].to_dict() for k in sorted(self.per_sequence)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalResult":
        per = {k: SequenceScore.from_dict(v) for k, v in d["per_sequence"].items()}
        return cls(per, SequenceScore.from_dict(d["aggregate"]))


def _check_length(gt: Sequence, pred: Seq[BBox]) -> None:
    if len(pred) != len(gt):
        raise DatasetError(f"{gt.name}: {len(pred)} predictions for {len(gt)} frames")


def _frame_errors(gt: Sequence, pred: Seq[BBox]) -> tuple[np.ndarray, np.ndarray]:
    _check_length(gt, pred)
    errs, ious = [], []
    for f, p in zip(gt.frames, pred):
        if f.absent:
            continue
        errs.append(center_error(f.box, p))
        ious.append(iou(f.box, p))
    return np.asarray(errs, dtype=np.float64), np.asarray(ious, dtype=np.float64)


def _mean(values) -> float:
    """Correctly rounded mean; independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values)


def _fractions(counts: np.ndarray, n: int) -> tuple[float, ...]:
    return tuple(float(c) / n for c in counts)


def precision_curve(gt: Sequence, pred: Seq[BBox]) -> Curve:
    errs, _ = _frame_errors(gt, pred)
    counts = [(errs <= t).sum() for t in PRECISION_THRESHOLDS]
    return Curve(PRECISION_THRESHOLDS, _fractions(counts, len(errs)))


def success_curve(gt: Sequence, pred: Seq[BBox]) -> Curve:
    _, ious = _frame_errors(gt, pred)
    counts = [(ious > t).sum() for t in SUCCESS_THRESHOLDS]
    return Curve(SUCCESS_THRESHOLDS, _fractions(counts, len(ious)))


def prc(curve: Curve) -> float:
    return curve.value_at(PRC_THRESHOLD)


def auc(curve: Curve) -> float:
    return _mean(curve.values)


def success_rate_at_half(gt: Sequence, pred: Seq[BBox]) -> float:
    _, ious = _frame_errors(gt, pred)
    return float((ious > 0.5).sum()) / len(ious)


def score_sequence(gt: Sequence, pred: Seq[BBox]) -> SequenceScore:
    pc = precision_curve(gt, pred)
    sc = success_curve(gt, pred)
    n = sum(1 for f in gt.frames if not f.absent)
    return SequenceScore(prc(pc), auc(sc), success_rate_at_half(gt, pred), pc, sc, n)


def _mean_curve(curves: Seq[Curve]) -> Curve:
    vals = [_mean(col) for col in zip(*(c.values for c in curves))]
    return Curve(curves[0].thresholds, tuple(min(1.0, max(0.0, v)) for v in vals))


def aggregate(per_sequence: Mapping[str, SequenceScore]) -> SequenceScore:
    """Unweighted mean over sequences, taken in sequence-name order."""
    scores = [per_sequence[k] for k in sorted(per_sequence)]
    return SequenceScore(
        prc=_mean(s.prc for s in scores),
        auc=_mean(s.auc for s in scores),
        success_at_half=_mean(s.success_at_half for s in scores),
        precision=_mean_curve([s.precision for s in scores]),
        success=_mean_curve([s.success for s in scores]),
        evaluated_frames=int(sum(s.evaluated_frames for s in scores)),
    )


def evaluate(dataset: Seq[Sequence], results: Mapping[str, Seq[BBox]]) -> EvalResult:
    per = {}
    for seq in dataset:
        if seq.name not in results:
            raise DatasetError(f"no results for sequence {seq.name}")
        per[seq.name] = score_sequence(seq, results[seq.name])
    if not per:
        raise DatasetError("nothing to evaluate")
    return EvalResult(per, aggregate(per))


def attribute_breakdown(result: EvalResult, dataset: Seq[Sequence]) -> dict[str, EvalResult]:
    out = {}
    for attr in ATTRIBUTES:
        names = [s.name for s in dataset if attr in s.attributes]
        if not names:
            continue
        per = {n: result.per_sequence[n] for n in names}
        out[attr] = EvalResult(per, aggregate(per))
    return out


def rank(evals: Mapping[str, EvalResult], key: str = "auc") -> list[str]:
    if key not in ("prc", "auc"):
        raise ValueError(f"unknown ranking key {key!r}")
    return sorted(evals, key=lambda name: (-getattr(evals[name], key), name))
