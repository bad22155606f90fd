"""Synthetic small/fast target sequences with distractors and occlusions.

Every object (the target and each distractor) owns two latent appearance
vectors. Low-level latents are unique per object. High-level latents are drawn
around a small number of shared cluster centres, so distractors look like the
target at the high level. Observed features are latents plus noise.

Sidecar files written next to each sequence bundle:

    scoremaps.bin   "width height stride frames\\n" then little-endian float32,
                    frame-major, row-major
    features.jsonl  one JSON list per frame of
                    {"pos": [x, y], "score", "feat_low", "feat_high", "object_id"}
    sim.json        generator config, image size and per-frame box scale
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import AbsenceKind, FrameAnnotation, Sequence, save_sequence
from .geometry import BBox
from .matcher import CandidateSet, gt_cells


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    num_frames: int = 100
    image_size: int = 128
    target_size: float = 10.0
    speed: float = 1.0
    num_distractors: int = 4
    distractor_spawn_rate: float = 0.02
    occlusion_probability: float = 0.0
    noise_sigma: float = 0.02
    feature_width: int = 32
    high_feature_cluster_count: int = 1
    seed: int = 0
    stride: int = 4
    feature_noise: float = 0.1
    high_perturbation: float = 0.05
    direction_jitter: float = 0.3
    distractor_speed_range: tuple[float, float] = (0.7, 1.3)
    category: str = "sim"

    def __post_init__(self):
        if self.num_frames < 1:
            raise SimConfigError("num_frames must be >= 1")
        if self.speed < 0:
            raise SimConfigError("speed must be >= 0")
        if self.target_size < 2:
            raise SimConfigError("target_size must be >= 2")
        if self.high_feature_cluster_count < 1:
            raise SimConfigError("need at least one high-level feature cluster")
        if self.stride <= 0 or self.image_size % self.stride:
            raise SimConfigError("stride must be positive and divide image_size")
        if self.image_size <= self.target_size:
            raise SimConfigError("image must be larger than the target")
        if self.num_distractors < 0 or not 0 <= self.distractor_spawn_rate <= 1:
            raise SimConfigError("bad distractor settings")
        if not 0 <= self.occlusion_probability <= 1 or self.noise_sigma < 0:
            raise SimConfigError("bad occlusion or noise settings")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractor_speed_range"] = list(self.distractor_speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "distractor_speed_range" in d:
            d["distractor_speed_range"] = tuple(d["distractor_speed_range"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SimConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride


@dataclass
class ScoreMap:
    values: np.ndarray  # (height, width)
    stride: float

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite score map")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SimSequence:
    config: SimConfig
    name: str
    score_maps: np.ndarray  # (T, H, W) float32
    tables: list[CandidateSet]
    sequence: Sequence
    scales: list[float] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.tables)

    @property
    def image_size(self) -> tuple[float, float]:
        s = float(self.config.image_size)
        return (s, s)

    def score_map(self, t: int) -> ScoreMap:
        return ScoreMap(self.score_maps[t], float(self.config.stride))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- generation


@dataclass
class _Mover:
    oid: int
    pos: np.ndarray
    heading: float
    step: float
    low: np.ndarray
    high: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _advance(m: _Mover, lo: float, hi: float, jitter: float, rng: np.random.Generator) -> None:
    m.heading += rng.normal(0.0, jitter)
    m.pos = m.pos + m.step * np.array([math.cos(m.heading), math.sin(m.heading)])
    for axis in (0, 1):
        if m.pos[axis] < lo:
            m.pos[axis] = 2 * lo - m.pos[axis]
        elif m.pos[axis] > hi:
            m.pos[axis] = 2 * hi - m.pos[axis]
        else:
            continue
        # reflect the heading about the wall normal
        if axis == 0:
            m.heading = math.pi - m.heading
        else:
            m.heading = -m.heading
    m.pos = np.clip(m.pos, lo, hi)


def _render(centres: list[np.ndarray], cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    g = cfg.grid
    cells = (np.arange(g) + 0.5) * cfg.stride
    sigma = cfg.target_size / 2.0
    out = np.zeros((g, g))
    for c in centres:
        gx = np.exp(-((cells - c[0]) ** 2) / (2 * sigma**2))
        gy = np.exp(-((cells - c[1]) ** 2) / (2 * sigma**2))
        out += np.outer(gy, gx)
    if cfg.noise_sigma > 0:
        out += rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return out.astype(np.float32)


def gen_sequence(cfg: SimConfig, name: str = "sim_000") -> SimSequence:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_width
    size = cfg.target_size
    lo, hi = size / 2.0, cfg.image_size - size / 2.0
    clusters = [_unit(rng.normal(size=d)) for _ in range(cfg.high_feature_cluster_count)]
    next_id = [0]

    def spawn(step: float) -> _Mover:
        oid = next_id[0]
        next_id[0] += 1
        high = clusters[int(rng.integers(len(clusters)))] + rng.normal(0.0, cfg.high_perturbation, d)
        return _Mover(
            oid,
            rng.uniform(lo, hi, size=2),
            float(rng.uniform(0, 2 * math.pi)),
            step,
            _unit(rng.normal(size=d)),
            high,
        )

    target = spawn(cfg.speed * size)
    a, b = cfg.distractor_speed_range
    slots: list[_Mover | None] = [
        spawn(cfg.speed * size * rng.uniform(a, b)) for _ in range(cfg.num_distractors)
    ]

    maps, tables, frames = [], [], []
    for t in range(cfg.num_frames):
        if t > 0:
            _advance(target, lo, hi, cfg.direction_jitter, rng)
            for k, m in enumerate(slots):
                if m is None:
                    if rng.random() < cfg.distractor_spawn_rate:
                        slots[k] = spawn(cfg.speed * size * rng.uniform(a, b))
                elif rng.random() < cfg.distractor_spawn_rate:
                    slots[k] = None
                else:
                    _advance(m, lo, hi, cfg.direction_jitter, rng)
        occluded = t > 0 and rng.random() < cfg.occlusion_probability
        visible = ([] if occluded else [target]) + [m for m in slots if m is not None]
        smap = _render([m.pos for m in visible], cfg, rng)
        maps.append(smap)
        tables.append(_observe(visible, smap, cfg, rng))
        if occluded:
            frames.append(FrameAnnotation.missing(AbsenceKind.FULL_OCCLUSION))
        else:
            frames.append(FrameAnnotation.present(BBox.from_center(target.pos[0], target.pos[1], size, size)))

    manual = {"BC"} if cfg.num_distractors > 0 else set()
    if any(f.absent for f in frames):
        manual.add("FOC")
    seq = Sequence(name, cfg.category, frames, frozenset(manual), 30.0)
    return SimSequence(cfg, name, np.stack(maps), tables, seq, [1.0] * cfg.num_frames)


def _observe(visible: list[_Mover], smap: np.ndarray, cfg: SimConfig, rng) -> CandidateSet:
    d = cfg.feature_width
    if not visible:
        return CandidateSet.empty(d)
    g = cfg.grid
    pos, score, low, high, ids = [], [], [], [], []
    for m in visible:
        c = np.clip((m.pos // cfg.stride).astype(int), 0, g - 1)
        pos.append(m.pos.copy())
        score.append(float(np.clip(smap[c[1], c[0]], 0.0, 1.0)))
        low.append(m.low + rng.normal(0.0, cfg.feature_noise, d))
        high.append(m.high + rng.normal(0.0, cfg.feature_noise, d))
        ids.append(m.oid)
    return CandidateSet(np.array(pos), np.array(score), np.array(high), np.array(low), ids)


def correspondences(seq: SimSequence, t: int) -> list[tuple[int, int]]:
    """Ground-truth cells between the object tables of frames t and t+1 (0-based)."""
    if not 0 <= t < seq.num_frames - 1:
        raise IndexError(f"frame pair ({t}, {t + 1}) outside a {seq.num_frames}-frame sequence")
    return gt_cells(seq.tables[t].object_ids, seq.tables[t + 1].object_ids)


# ---------------------------------------------------------------- on-disk sidecars


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_sim_sequence(seq: SimSequence, out: str | os.PathLike) -> Path:
    out = Path(out)
    save_sequence(seq.sequence, out)
    t, h, w = seq.score_maps.shape
    header = f"{w} {h} {seq.config.stride} {t}\n".encode("ascii")
    _write_atomic(out / "scoremaps.bin", header + seq.score_maps.astype("<f4").tobytes())
    lines = []
    for table in seq.tables:
        rows = [
            {
                "pos": [float(v) for v in table.positions[i]],
                "score": float(table.scores[i]),
                "feat_low": [float(v) for v in table.feat_low[i]],
                "feat_high": [float(v) for v in table.feat_high[i]],
                "object_id": table.object_ids[i],
            }
            for i in range(len(table))
        ]
        lines.append(json.dumps(rows, separators=(",", ":")))
    _write_atomic(out / "features.jsonl", ("\n".join(lines) + "\n").encode("utf-8"))
    side = {"config": seq.config.to_dict(), "image_size": list(seq.image_size), "scales": seq.scales}
    _write_atomic(out / "sim.json", (json.dumps(side, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return out


def has_sim_sidecars(path: str | os.PathLike) -> bool:
    p = Path(path)
    return all((p / f).is_file() for f in ("scoremaps.bin", "features.jsonl", "sim.json"))


def load_sim_sequence(path: str | os.PathLike) -> SimSequence:
    from .dataset import load_sequence

    path = Path(path)
    if not has_sim_sidecars(path):
        raise FileNotFoundError(f"{path} lacks simulator sidecars")
    seq = load_sequence(path)
    side = json.loads((path / "sim.json").read_text(encoding="utf-8"))
    cfg = SimConfig.from_dict(side["config"])
    raw = (path / "scoremaps.bin").read_bytes()
    nl = raw.index(b"\n")
    w, h, stride, t = (int(v) for v in raw[:nl].decode("ascii").split())
    maps = np.frombuffer(raw[nl + 1 :], dtype="<f4")
    if maps.size != w * h * t or stride != cfg.stride:
        raise ValueError(f"{path}: score map payload does not match its header")
    maps = maps.reshape(t, h, w).astype(np.float32)
    tables = []
    for line in (path / "features.jsonl").read_text(encoding="utf-8").splitlines():
        rows = json.loads(line)
        if not rows:
            tables.append(CandidateSet.empty(cfg.feature_width))
            continue
        tables.append(
            CandidateSet(
                np.array([r["pos"] for r in rows]),
                np.array([r["score"] for r in rows]),
                np.array([r["feat_high"] for r in rows]),
                np.array([r["feat_low"] for r in rows]),
                [r["object_id"] for r in rows],
            )
        )
    if len(tables) != t or len(seq) != t:
        raise ValueError(f"{path}: frame counts disagree between sidecars and annotations")
    return SimSequence(cfg, seq.name, maps, tables, seq, [float(s) for s in side["scales"]])


def gen_dataset(template: SimConfig, count: int, seed: int, out_dir: str | os.PathLike,
                prefix: str = "sim") -> list[Path]:
    """Write `count` sequence bundles; sequence i is seeded from (seed, name)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    paths = []
    for i in range(count):
        name = f"{prefix}_{i:03d}"
        cfg = replace(template, seed=derive_seed("simulate", seed, name))
        paths.append(save_sim_sequence(gen_sequence(cfg, name), out_dir / name))
    return paths
