"""Sequence bundles on disk, rule-based attributes and benchmark statistics.

A sequence bundle is a directory holding::

    meta.json         {"name", "category", "frame_rate", "manual_attributes": [...]}
    groundtruth.txt   one "x,y,w,h" line per frame, or the literal "absent"
    absence.txt       one integer per frame: 0 present, 1 out of view, 2 full occlusion

A dataset root holds one bundle per subdirectory.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np

from .geometry import BBox, center_error, relative_speed

ATTRIBUTES = ("IV", "DEF", "MB", "ROT", "BC", "SV", "OV", "LR", "ARC", "POC", "FOC", "FM")
AUTO_ATTRIBUTES = ("SV", "LR", "ARC", "FM")

LR_AREA = 900.0
RATIO_RANGE = (0.5, 2.0)
FM_FRACTION = 0.5

# Reference values for the real benchmark; not reproducible without its videos.
REFERENCE_AVG_TARGET_SIZE = 0.51e3
REFERENCE_AVG_RELATIVE_SPEED = 58.28e-1


class DatasetError(ValueError):
    """Raised for malformed or inconsistent sequence/result files."""


class AbsenceKind(enum.IntEnum):
    NONE = 0
    OUT_OF_VIEW = 1
    FULL_OCCLUSION = 2


@dataclass(frozen=True)
class FrameAnnotation:
    box: BBox | None
    absent: bool = False
    absence_kind: AbsenceKind = AbsenceKind.NONE

    def __post_init__(self):
        if self.absent != (self.box is None):
            raise DatasetError("a frame is absent exactly when it carries no box")
        if self.absence_kind != AbsenceKind.NONE and not self.absent:
            raise DatasetError("absence kind set on a present frame")

    @classmethod
    def present(cls, box: BBox) -> "FrameAnnotation":
        return cls(box, False, AbsenceKind.NONE)

    @classmethod
    def missing(cls, kind: AbsenceKind = AbsenceKind.NONE) -> "FrameAnnotation":
        return cls(None, True, kind)


@dataclass
class Sequence:
    name: str
    category: str
    frames: list[FrameAnnotation]
    manual_attributes: frozenset[str] = frozenset()
    frame_rate: float = 30.0
    _auto: frozenset[str] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.frames:
            raise DatasetError(f"{self.name}: sequence has no frames")
        if self.frames[0].absent:
            raise DatasetError(f"{self.name}: first frame must be present to initialise a tracker")
        self.manual_attributes = frozenset(self.manual_attributes)
        unknown = self.manual_attributes - set(ATTRIBUTES)
        if unknown:
            raise DatasetError(f"{self.name}: unknown attributes {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list[BBox | None]:
        return [f.box for f in self.frames]

    @property
    def attributes(self) -> frozenset[str]:
        """Manual labels merged with the geometry-derived ones."""
        if self._auto is None:
            self._auto = frozenset(compute_auto_attributes(self))
        return self.manual_attributes | self._auto

    def translated(self, dx: float, dy: float) -> "Sequence":
        frames = [
            f if f.absent else FrameAnnotation.present(f.box.translated(dx, dy)) for f in self.frames
        ]
        return Sequence(self.name, self.category, frames, self.manual_attributes, self.frame_rate)


@dataclass(frozen=True)
class DatasetStats:
    avg_target_size: float
    avg_relative_speed: float
    num_sequences: int
    total_frames: int
    min_frames: int
    max_frames: int
    avg_frames: float
    num_speed_pairs: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class AttributeMatrix:
    counts: np.ndarray
    labels: tuple[str, ...] = ATTRIBUTES

    def __getitem__(self, key: tuple[str, str]) -> int:
        a, b = key
        return int(self.counts[self.labels.index(a), self.labels.index(b)])


# ---------------------------------------------------------------- parsing


def _parse_box(text: str, where: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise DatasetError(f"{where}: expected 4 comma-separated numbers, got {text!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise DatasetError(f"{where}: malformed number in {text!r}") from exc
    try:
        return BBox(*vals)
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    return [ln.strip() for ln in lines]


def format_box(b: BBox) -> str:
    return ",".join(repr(float(v)) for v in b.as_tuple())


def load_sequence(path: str | os.PathLike) -> Sequence:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: {exc}") from exc

    gt_lines = _read_lines(path / "groundtruth.txt")
    ab_lines = _read_lines(path / "absence.txt")
    if len(gt_lines) != len(ab_lines):
        raise DatasetError(
            f"{path}: groundtruth has {len(gt_lines)} lines but absence has {len(ab_lines)}"
        )

    frames = []
    for i, (g, a) in enumerate(zip(gt_lines, ab_lines)):
        where = f"{path.name}:{i + 1}"
        try:
            kind = AbsenceKind(int(a))
        except ValueError as exc:
            raise DatasetError(f"{where}: bad absence flag {a!r}") from exc
        if g == "absent":
            frames.append(FrameAnnotation.missing(kind))
        else:
            if kind != AbsenceKind.NONE:
                raise DatasetError(f"{where}: box given on a frame flagged absent")
            frames.append(FrameAnnotation.present(_parse_box(g, where)))

    try:
        return Sequence(
            name=str(meta.get("name", path.name)),
            category=str(meta.get("category", "unknown")),
            frames=frames,
            manual_attributes=frozenset(meta.get("manual_attributes", [])),
            frame_rate=float(meta.get("frame_rate", 30.0)),
        )
    except KeyError as exc:
        raise DatasetError(f"{meta_path}: missing key {exc}") from exc


def save_sequence(seq: Sequence, path: str | os.PathLike, extra_meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": seq.name,
        "category": seq.category,
        "frame_rate": seq.frame_rate,
        "manual_attributes": sorted(seq.manual_attributes),
    }
    if extra_meta:
        meta.update(extra_meta)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    gt = ["absent" if f.absent else format_box(f.box) for f in seq.frames]
    ab = [str(int(f.absence_kind)) for f in seq.frames]
    (path / "groundtruth.txt").write_text("\n".join(gt) + "\n", encoding="utf-8")
    (path / "absence.txt").write_text("\n".join(ab) + "\n", encoding="utf-8")


def load_dataset(root: str | os.PathLike) -> list[Sequence]:
    """Load every bundle under `root`, ordered by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise DatasetError(f"no sequence bundles under {root}")
    return [load_sequence(d) for d in dirs]


def load_results(path: str | os.PathLike, expected_len: int | None = None) -> list[BBox]:
    lines = _read_lines(Path(path))
    if lines and lines[-1] == "":
        lines = lines[:-1]
    boxes = [_parse_box(ln, f"{Path(path).name}:{i + 1}") for i, ln in enumerate(lines)]
    if expected_len is not None and len(boxes) != expected_len:
        raise DatasetError(f"{path}: {len(boxes)} result lines for a {expected_len}-frame sequence")
    return boxes


def save_results(boxes: Iterable[BBox], path: str | os.PathLike) -> None:
    text = "".join(format_box(b) + "\n" for b in boxes)
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- attributes


def _outside(r: float, lo_hi=RATIO_RANGE) -> bool:
    return r < lo_hi[0] or r > lo_hi[1]


def _present_pairs(seq: Sequence):
    """Consecutive frames that are both present; an absence breaks the chain."""
    for prev, cur in zip(seq.frames, seq.frames[1:]):
        if not prev.absent and not cur.absent:
            yield prev.box, cur.box


def compute_auto_attributes(seq: Sequence) -> set[str]:
    """Evaluate the SV, LR, ARC and FM rules on the annotated geometry.

    SV and ARC compare each present box against the first frame; FM compares the
    centre shift with the square root of the previous box's area.
    """
    present = [f.box for f in seq.frames if not f.absent]
    out: set[str] = set()
    if not present:
        return out
    first = present[0]
    first_aspect = first.w / first.h
    for b in present:
        if _outside(b.area / first.area):
            out.add("SV")
        if b.area < LR_AREA:
            out.add("LR")
        if _outside((b.w / b.h) / first_aspect):
            out.add("ARC")
    for prev, cur in _present_pairs(seq):
        if center_error(prev, cur) >= FM_FRACTION * math.sqrt(prev.area):
            out.add("FM")
            break
    return out


def attribute_cooccurrence(sequences: Seq[Sequence]) -> AttributeMatrix:
    k = len(ATTRIBUTES)
    counts = np.zeros((k, k), dtype=np.int64)
    for seq in sequences:
        idx = [ATTRIBUTES.index(a) for a in seq.attributes]
        for i in idx:
            for j in idx:
                counts[i, j] += 1
    return AttributeMatrix(counts)


# ---------------------------------------------------------------- statistics


def dataset_stats(sequences: Seq[Sequence]) -> DatasetStats:
    if not sequences:
        raise DatasetError("statistics need at least one sequence")
    areas = [f.box.area for s in sequences for f in s.frames if not f.absent]
    speeds = [relative_speed(p, c) for s in sequences for p, c in _present_pairs(s)]
    lengths = [len(s) for s in sequences]
    return DatasetStats(
        avg_target_size=float(np.mean(areas)) if areas else 0.0,
        avg_relative_speed=float(np.mean(speeds)) if speeds else 0.0,
        num_sequences=len(sequences),
        total_frames=int(sum(lengths)),
        min_frames=int(min(lengths)),
        max_frames=int(max(lengths)),
        avg_frames=float(np.mean(lengths)),
        num_speed_pairs=len(speeds),
    )


def category_lengths(sequences: Seq[Sequence]) -> dict[str, dict[str, float]]:
    by_cat: dict[str, list[int]] = {}
    for s in sequences:
        by_cat.setdefault(s.category, []).append(len(s))
    return {
        c: {"avg": float(np.mean(v)), "min": int(min(v)), "max": int(max(v)), "count": len(v)}
        for c, v in sorted(by_cat.items())
    }
