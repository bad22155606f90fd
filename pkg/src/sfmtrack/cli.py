"""Command-line entry point: ``sfmtrack <command> ...``.

Every command writes a ``config.json`` (or ``<checkpoint>.config.json`` for
``train``) holding the parameters that produced its outputs. Options can also
be supplied through ``--config FILE``; explicit flags win over the file. For
``simulate`` the file is the simulator config itself, plus an optional
``count``.

Exit codes: 0 success, 2 bad input, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import dataset as ds
from . import matcher as mt
from . import metrics, pipeline, report
from .dataset import ATTRIBUTES, DatasetError
from .metrics import EvalResult
from .sim import SimConfig, SimConfigError, gen_dataset
from .tracker import TrackerConfig

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3

# options that never change what a command writes
_UNRECORDED = {"jobs", "out", "config", "func"}


class InputError(Exception):
    pass


# ---------------------------------------------------------------- output helpers


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_config(args: argparse.Namespace, **extra) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in _UNRECORDED}
    cfg.update(extra)
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _f(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_stats(args) -> int:
    seqs = ds.load_dataset(args.dataset)
    st = ds.dataset_stats(seqs)
    cats = ds.category_lengths(seqs)
    out = Path(args.out)
    rows = ["key,value"] + [f"{k},{v!r}" for k, v in st.to_dict().items()]
    cat_rows = ["category,count,avg_frames,min_frames,max_frames"] + [
        f"{c},{v['count']},{_f(v['avg'])},{v['min']},{v['max']}" for c, v in cats.items()
    ]
    write_atomic(out / "stats.csv", "\n".join(rows) + "\n")
    write_atomic(out / "categories.csv", "\n".join(cat_rows) + "\n")
    write_atomic(out / "config.json", dump_json(run_config(args)))
    write_atomic(out / "stats.json", dump_json({"stats": st.to_dict(), "categories": cats}))
    return EXIT_OK


def cmd_attrs(args) -> int:
    seqs = ds.load_dataset(args.dataset)
    table = {}
    for s in seqs:
        auto = ds.compute_auto_attributes(s)
        table[s.name] = {
            "manual": [a for a in ATTRIBUTES if a in s.manual_attributes],
            "auto": [a for a in ATTRIBUTES if a in auto],
            "all": [a for a in ATTRIBUTES if a in s.attributes],
        }
    m = ds.attribute_cooccurrence(seqs)
    lines = ["," + ",".join(m.labels)]
    for i, a in enumerate(m.labels):
        lines.append(a + "," + ",".join(str(int(v)) for v in m.counts[i]))
    out = Path(args.out)
    write_atomic(out / "cooccurrence.csv", "\n".join(lines) + "\n")
    write_atomic(out / "config.json", dump_json(run_config(args)))
    write_atomic(out / "attributes.json", dump_json(table))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.config is None:
        raise InputError("simulate needs --config FILE with the simulator settings")
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise InputError(f"{args.config}: expected a JSON object")
    raw = dict(raw)
    count = raw.pop("count", args.count)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    raw.pop("seed", None)
    if not isinstance(count, int) or count < 1:
        raise InputError(f"count must be a positive integer, got {count!r}")
    template = SimConfig.from_dict(raw)
    out = Path(args.out)
    gen_dataset(template, count, seed, out)
    cfg = {"command": "simulate", "count": count, "seed": seed, "sim": template.to_dict()}
    write_atomic(out / "config.json", dump_json(cfg))
    return EXIT_OK


def _train_config(args) -> mt.TrainConfig:
    return mt.TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr)


def cmd_train(args) -> int:
    seqs = pipeline.load_sim_dataset(args.dataset)
    seed = args.seed or 0

    def log(step, loss):
        print(f"step {step}: loss {loss:.4f}", file=sys.stderr)

    params, mcfg, history = pipeline.train(seqs, args.omega, seed, _train_config(args), args.branches,
                                           tcfg=TrackerConfig(n_max=args.n_max), log=log if args.verbose else None)
    if not all(map(lambda v: v == v and abs(v) != float("inf"), history)):
        raise AssertionError("non-finite training loss")
    ckpt = Path(args.out)
    rc = run_config(args, seed=seed)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    mt.save_matcher(ckpt, params, mcfg, {"run": rc})
    loss_csv = "step,loss\n" + "".join(f"{i},{_f(v)}\n" for i, v in enumerate(history))
    write_atomic(ckpt.with_name(ckpt.name + ".loss.csv"), loss_csv)
    write_atomic(ckpt.with_name(ckpt.name + ".config.json"), dump_json(rc))
    return EXIT_OK


def _check_architecture(params: dict, mcfg: mt.MatcherConfig) -> None:
    ref = mt.init_params(mcfg, 0)
    needed = {k for k in ref if mcfg.branches == "both" or not k.startswith("low.")}
    missing = sorted(needed - params.keys())
    wrong = sorted(k for k in needed & params.keys() if params[k].shape != ref[k].shape)
    if missing or wrong:
        raise InputError(f"checkpoint does not fit its declared architecture "
                         f"(missing: {missing[:3]}, wrong shape: {wrong[:3]})")


def cmd_track(args) -> int:
    seqs = pipeline.load_sim_dataset(args.dataset)
    ckpt = Path(args.checkpoint)
    try:
        params, mcfg, _ = mt.load_matcher(ckpt)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{ckpt}: unreadable checkpoint header ({exc})") from exc
    if args.high_only:
        mcfg.branches = "high"
    _check_architecture(params, mcfg)
    if seqs[0].config.feature_width != mcfg.raw_width:
        raise InputError(f"checkpoint expects {mcfg.raw_width}-wide features, "
                         f"dataset has {seqs[0].config.feature_width}")
    tcfg = TrackerConfig(n_max=args.n_max)
    tracks = pipeline.track_all(seqs, params, mcfg, tcfg, args.jobs)
    out = Path(args.out)
    for name, (boxes, betas) in tracks.items():
        out.mkdir(parents=True, exist_ok=True)
        ds.save_results(boxes, out / f"{name}.txt")
        write_atomic(out / f"{name}.beta.txt", "".join(f"{_f(b)}\n" for b in betas))
    rc = run_config(args, checkpoint_sha256=_sha256(ckpt), matcher=mcfg.to_dict(), tracker=tcfg.to_dict())
    write_atomic(out / "config.json", dump_json(rc))
    return EXIT_OK


def _tracker_specs(specs: list[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for s in specs:
        name, sep, path = s.partition("=")
        if not sep:
            path, name = s, Path(s).resolve().name
        if name in out:
            raise InputError(f"duplicate tracker name {name!r}")
        out[name] = Path(path)
    return out


def evaluate_dirs(seqs: list[ds.Sequence], trackers: dict[str, Path]) -> dict[str, EvalResult]:
    evals = {}
    for name, d in trackers.items():
        if not d.is_dir():
            raise DatasetError(f"results directory {d} does not exist")
        results = {}
        for s in seqs:
            f = d / f"{s.name}.txt"
            if not f.is_file():
                raise DatasetError(f"{name}: missing results for {s.name}")
            results[s.name] = ds.load_results(f, len(s))
        evals[name] = metrics.evaluate(seqs, results)
    return evals


def cmd_eval(args) -> int:
    seqs = ds.load_dataset(args.dataset)
    evals = evaluate_dirs(seqs, _tracker_specs(args.results))
    by_auc, by_prc = metrics.rank(evals, "auc"), metrics.rank(evals, "prc")
    out = Path(args.out)
    rank_rows = ["rank,tracker,auc,prc,success_at_half,evaluated_frames"] + [
        f"{i + 1},{n},{_f(evals[n].auc)},{_f(evals[n].prc)},"
        f"{_f(evals[n].aggregate.success_at_half)},{evals[n].evaluated_frames}"
        for i, n in enumerate(by_auc)
    ]
    attr_rows = ["tracker,attribute,sequences,auc,prc"]
    for n in by_auc:
        write_atomic(out / "curves" / f"{n}.precision.csv", evals[n].aggregate.precision.to_csv())
        write_atomic(out / "curves" / f"{n}.success.csv", evals[n].aggregate.success.to_csv())
        for attr, sub in metrics.attribute_breakdown(evals[n], seqs).items():
            attr_rows.append(f"{n},{attr},{len(sub.per_sequence)},{_f(sub.auc)},{_f(sub.prc)}")
    write_atomic(out / "ranking.csv", "\n".join(rank_rows) + "\n")
    write_atomic(out / "attributes.csv", "\n".join(attr_rows) + "\n")
    write_atomic(out / "config.json", dump_json(run_config(args)))
    payload = {
        "trackers": {n: evals[n].to_dict() for n in by_auc},
        "ranking": {"auc": by_auc, "prc": by_prc},
    }
    write_atomic(out / "eval.json", dump_json(payload))
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"bad omega grid {text!r}") from exc
    if not grid:
        raise InputError("empty omega grid")
    if any(not 0.0 <= w <= 1.0 for w in grid):
        raise InputError("omega values must lie in [0, 1]")
    return grid


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    seqs = pipeline.load_sim_dataset(args.dataset)
    if args.eval_dataset:
        train_seqs, test_seqs = seqs, pipeline.load_sim_dataset(args.eval_dataset)
    else:
        train_seqs, test_seqs = pipeline.split(seqs)
        if not train_seqs or not test_seqs:
            raise InputError("need at least two sequences to split into train and held-out halves")
    seed = args.seed or 0

    def log(row):
        print(f"omega {row.omega}: PRC {row.prc:.3f} AUC {row.auc:.3f}", file=sys.stderr)

    res = pipeline.sweep(train_seqs, test_seqs, grid, seed, _train_config(args), TrackerConfig(n_max=args.n_max),
                         check_reduction=not args.skip_reduction_check, jobs=args.jobs,
                         log=log if args.verbose else None)
    out = Path(args.out)
    lines = ["omega,prc,auc,association_accuracy"] + [
        f"{_f(r.omega)},{_f(r.prc)},{_f(r.auc)},{_f(r.association_accuracy)}" for r in res.rows
    ]
    write_atomic(out / "sweep.csv", "\n".join(lines) + "\n")
    rc = run_config(args, seed=seed, train_sequences=[s.name for s in train_seqs],
                    eval_sequences=[s.name for s in test_seqs])
    write_atomic(out / "config.json", dump_json(rc))
    summary = {
        "rows": [r.__dict__ for r in res.rows],
        "best_omega": res.best.omega,
        "omega1_matches_high_only": res.reduction_holds,
    }
    write_atomic(out / "sweep.json", dump_json(summary))
    if res.reduction_holds is False:
        raise AssertionError("omega=1 tracks differ from the high-branch-only tracker")
    return EXIT_OK


def load_eval_json(path: Path) -> dict[str, EvalResult]:
    data = _read_json(path)
    try:
        trackers = data["trackers"] if "trackers" in data else {Path(path).stem: data}
        evals = {n: EvalResult.from_dict(d) for n, d in trackers.items()}
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise InputError(f"{path}: malformed evaluation JSON ({exc})") from exc
    if not evals:
        raise InputError(f"{path}: no trackers")
    return evals


def cmd_report(args) -> int:
    evals = load_eval_json(Path(args.eval_json))
    out = Path(args.out)
    for fname, text in report.render(evals).items():
        write_atomic(out / fname, text)
    write_atomic(out / "config.json", dump_json(run_config(args, eval_sha256=_sha256(Path(args.eval_json)))))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    std = pipeline.STANDARD_TRAIN
    p.add_argument("--steps", type=int, default=std.steps)
    p.add_argument("--batch-size", type=int, default=std.batch_size)
    p.add_argument("--lr", type=float, default=std.lr)
    p.add_argument("--n-max", type=int, default=pipeline.STANDARD_TRACKER.n_max,
                   help="candidates kept per frame")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")

    parser = argparse.ArgumentParser(prog="sfmtrack", description="Small fast-moving object tracking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("attrs", parents=[common], help="attribute labels and co-occurrence")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attrs)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the candidate matcher")
    p.add_argument("dataset")
    p.add_argument("out", help="checkpoint path")
    p.add_argument("--omega", type=float, default=0.2)
    p.add_argument("--branches", choices=("both", "high"), default="both")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="run the tracker on every sequence")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--high-only", action="store_true", help="ignore the low-level branch")
    p.add_argument("--n-max", type=int, default=pipeline.STANDARD_TRACKER.n_max)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="one-pass evaluation of result directories")
    p.add_argument("dataset")
    p.add_argument("results", nargs="+", help="DIR or NAME=DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="train/track/eval over a grid of omega")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=",".join(str(w) for w in pipeline.OMEGA_GRID))
    p.add_argument("--eval-dataset", default=None,
                   help="held-out dataset (default: odd-indexed sequences of DATASET)")
    p.add_argument("--skip-reduction-check", action="store_true")
    _add_training_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="precision/success plots from eval.json")
    p.add_argument("eval_json")
    p.add_argument("out")
    p.set_defaults(func=cmd_report)
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None and args.command != "simulate":
        defaults = _read_json(args.config)
        if not isinstance(defaults, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions if a.option_strings} - {"help", "config"}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise InputError(f"{args.config}: unknown options {unknown}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except AssertionError as exc:
        print(f"sfmtrack: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, DatasetError, SimConfigError, ValueError, OSError, KeyError) as exc:
        print(f"sfmtrack: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
