"""Train / track / evaluate orchestration shared by the CLI and the demos.

The standard benchmark setup lives here: the default simulator config
(clustered high-level appearance, four distractors), at most ten candidates per
frame and a 600-step Adam run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence as Seq

from . import matcher as mt
from . import metrics
from . import tracker as tk
from .dataset import DatasetError
from .geometry import BBox
from .matcher import MatcherConfig, PairSample, TrainConfig
from .sim import SimConfig, SimSequence, derive_seed, gen_sequence, has_sim_sidecars, load_sim_sequence
from .tracker import TrackerConfig

STANDARD_SIM = SimConfig()
STANDARD_TRACKER = TrackerConfig(n_max=10)
STANDARD_TRAIN = TrainConfig(steps=600, batch_size=8, lr=3e-3)
OMEGA_GRID = tuple(round(0.1 * k, 1) for k in range(11))


def standard_matcher(omega: float = 0.2, branches: str = "both", **kw) -> MatcherConfig:
    return MatcherConfig(omega=omega, branches=branches, n_max=STANDARD_TRACKER.n_max, **kw)


def load_sim_dataset(root: str | os.PathLike) -> list[SimSequence]:
    """All sequence bundles under `root`, sorted by name; each must carry sidecars."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise DatasetError(f"{root} contains no sequences")
    missing = [p.name for p in dirs if not has_sim_sidecars(p)]
    if missing:
        raise DatasetError(f"sequences without simulator sidecars: {', '.join(missing)}")
    return [load_sim_sequence(p) for p in dirs]


def generate(template: SimConfig, count: int, seed: int, prefix: str = "sim") -> list[SimSequence]:
    """In-memory twin of `sim.gen_dataset` (same names, same seeds)."""
    out = []
    for i in range(count):
        name = f"{prefix}_{i:03d}"
        out.append(gen_sequence(replace(template, seed=derive_seed("simulate", seed, name)), name))
    return out


def split(seqs: Seq[SimSequence]) -> tuple[list[SimSequence], list[SimSequence]]:
    """Even/odd positions in name order: train, held-out."""
    ordered = sorted(seqs, key=lambda s: s.name)
    return ordered[0::2], ordered[1::2]


def collect_pairs(seqs: Seq[SimSequence], tcfg: TrackerConfig = STANDARD_TRACKER) -> list[PairSample]:
    return [p for s in seqs for p in tk.training_pairs(s, tcfg)]


def _image_size(seqs: Seq[SimSequence]) -> tuple[float, float]:
    sizes = {s.image_size for s in seqs}
    if len(sizes) != 1:
        raise DatasetError(f"sequences disagree on image size: {sorted(sizes)}")
    return sizes.pop()


def train(seqs: Seq[SimSequence], omega: float, seed: int, train_cfg: TrainConfig = STANDARD_TRAIN,
          branches: str = "both", tcfg: TrackerConfig = STANDARD_TRACKER,
          log: Callable | None = None) -> tuple[dict, MatcherConfig, list[float]]:
    """Fit a matcher on the labelled consecutive-frame pairs of `seqs`.

    The parameter init and batch order depend on `seed` only, so runs that
    differ just in omega start from the same point.
    """
    mcfg = standard_matcher(omega, branches, image_size=_image_size(seqs),
                            raw_width=seqs[0].config.feature_width)
    pairs = collect_pairs(seqs, tcfg)
    params, history = mt.train_matcher(pairs, mcfg, replace(train_cfg, seed=derive_seed("train", seed)),
                                       log=log)
    return params, mcfg, history


def _track_one(args):
    seq, params, mcfg, tcfg = args
    return seq.name, tk.run_sequence(seq, params, mcfg, tcfg)


def track_all(seqs: Seq[SimSequence], params: Mapping, mcfg: MatcherConfig,
              tcfg: TrackerConfig = STANDARD_TRACKER, jobs: int = 1) -> dict[str, tuple[list[BBox], list[float]]]:
    """Run the tracker on every sequence; the result does not depend on `jobs`."""
    work = [(s, params, mcfg, tcfg) for s in seqs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_track_one, work))
    else:
        out = [_track_one(w) for w in work]
    return dict(sorted(out))


def evaluate_tracks(seqs: Seq[SimSequence], tracks: Mapping[str, tuple]) -> metrics.EvalResult:
    return metrics.evaluate([s.sequence for s in seqs], {k: v[0] for k, v in tracks.items()})


@dataclass(frozen=True)
class SweepRow:
    omega: float
    prc: float
    auc: float
    association_accuracy: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    # omega=1 tracks equal a run of the high branch alone (None when not checked)
    reduction_holds: bool | None

    @property
    def best(self) -> SweepRow:
        return max(self.rows, key=lambda r: (r.auc, -r.omega))


def sweep(train_seqs: Seq[SimSequence], test_seqs: Seq[SimSequence], grid: Seq[float], seed: int,
          train_cfg: TrainConfig = STANDARD_TRAIN, tcfg: TrackerConfig = STANDARD_TRACKER,
          check_reduction: bool = True, jobs: int = 1, log: Callable | None = None) -> SweepResult:
    if not grid:
        raise ValueError("empty omega grid")
    held_out = collect_pairs(test_seqs, tcfg)
    rows, tracks_at_one = [], None
    for omega in grid:
        params, mcfg, _ = train(train_seqs, omega, seed, train_cfg, tcfg=tcfg)
        tracks = track_all(test_seqs, params, mcfg, tcfg, jobs)
        ev = evaluate_tracks(test_seqs, tracks)
        acc = mt.evaluate_association(held_out, params, mcfg)
        rows.append(SweepRow(float(omega), ev.prc, ev.auc, acc))
        if omega == 1.0:
            tracks_at_one = tracks
        if log is not None:
            log(rows[-1])
    reduction = None
    if check_reduction and tracks_at_one is not None:
        params, mcfg, _ = train(train_seqs, 1.0, seed, train_cfg, branches="high", tcfg=tcfg)
        reduction = track_all(test_seqs, params, mcfg, tcfg, jobs) == tracks_at_one
    return SweepResult(rows, reduction)
