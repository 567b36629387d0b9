"""Command-line front end: ``ccvl {config,collect,train,eval,coverage,sweep}``.

Every command reads one JSON config, writes its outputs under ``--out`` and
records a ``manifest.json`` next to them. Outputs other than the manifest are
byte-identical across re-runs with the same config and seed; the manifest
additionally carries timestamps and wall time.

Exit codes: 0 success, 2 configuration error, 3 convergence failure,
4 table/environment shape mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adaptive import FIXED_DELTA, AdaptivePolicyConfig
from .baselines import EnsembleQ, QTable, fixed_ccvl_select
from .data import OfflineDataset, build_empirical_model, collect_dataset
from .errors import ConfigError, ConvergenceError, ShapeMismatchError
from .harness import (
    PRESETS,
    ExperimentConfig,
    alpha_sweep,
    coverage_experiment,
    evaluate,
    make_agent,
    normalizer,
    summarize_sweep,
    sweep_table_csv,
    train_method,
)
from .solver import UPPER, ConfidenceQ

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_SHAPE = 0, 2, 3, 4


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def load_config(path, seed=None, command: str = "") -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if seed is not None and isinstance(raw, dict):
        raw = apply_seed(raw, command, seed)
    return ExperimentConfig.from_dict(raw)


def apply_seed(raw: dict, command: str, seed: int) -> dict:
    """Fold a ``--seed`` override into the config so it is part of the hash."""
    raw = json.loads(json.dumps(raw))
    if command in ("collect", "train"):
        raw.setdefault("dataset", {})["seed"] = seed
        solver = raw.setdefault("solver", {})
        size = solver.get("ensemble_size", 5)
        solver["ensemble_seeds"] = [seed + i for i in range(size)]
    elif command == "eval":
        raw.setdefault("eval", {})["seeds"] = [seed]
    elif command == "coverage":
        raw.setdefault("coverage", {})["seed"] = seed
    elif command == "sweep":
        n = len(raw.get("sweep", {}).get("seeds", [0, 1, 2, 3, 4]))
        raw.setdefault("sweep", {})["seeds"] = [seed + i for i in range(n)]
    return raw


class Outputs:
    """Collects written files so the manifest can list them with digests."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.paths: list = []

    def write(self, rel: str, text: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.paths.append(rel)
        return p

    def manifest(self, command: str, cfg: ExperimentConfig, seeds, started: float, started_iso: str) -> dict:
        digests = {rel: hashlib.sha256((self.root / rel).read_bytes()).hexdigest() for rel in self.paths}
        m = {
            "command": command,
            "config_hash": config_hash(cfg.raw),
            "tool_version": __version__,
            "seeds": list(seeds),
            "output_paths": list(self.paths),
            "output_digests": digests,
            "timestamps": {"started": started_iso, "finished": _now()},
            "wall_time": time.perf_counter() - started,
        }
        (self.root / "manifest.json").write_text(_dump(m))
        return m


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- commands -----------------------------------------------------------------------


def cmd_config(args) -> int:
    text = _dump(PRESETS[args.preset]())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_collect(args) -> int:
    t0, iso = time.perf_counter(), _now()
    cfg = load_config(args.config, args.seed, "collect")
    mdp = cfg.train_mdp()
    d = cfg.dataset
    data = collect_dataset(mdp, cfg.behavior_policy(mdp), d.num_samples, d.horizon, d.seed)
    out = Outputs(args.out)
    out.write("dataset.jsonl", data.to_jsonl())
    out.manifest("collect", cfg, [d.seed], t0, iso)
    print(f"wrote {len(data)} transitions to {out.root / 'dataset.jsonl'}")
    return EXIT_OK


def _load_dataset(path, mdp) -> OfflineDataset:
    try:
        return OfflineDataset.load_jsonl(path, mdp.num_states, mdp.num_actions)
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {path}") from None


def _table_doc(trained, method: str) -> dict:
    doc = trained.to_dict()
    doc["method"] = method
    return doc


def cmd_train(args) -> int:
    t0, iso = time.perf_counter(), _now()
    cfg = load_config(args.config, args.seed, "train")
    mdp = cfg.train_mdp()
    data = _load_dataset(args.dataset, mdp)
    model = build_empirical_model(data, mdp.discount, mdp.r_max)
    method = cfg.solver.method
    trained, report = train_method(model, method, cfg.solver)
    out = Outputs(args.out)
    out.write("table.json", _dump(_table_doc(trained, method)))
    if args.format == "csv":
        if isinstance(trained, EnsembleQ):
            for i, m in enumerate(trained.members):
                out.write(f"table_member{i}.csv", m.to_csv())
        else:
            out.write("table.csv", trained.to_csv())
    report = {"method": method, "alpha": cfg.solver.alpha, **report}
    out.write("solve_report.json", _dump(report))
    seeds = list(cfg.solver.ensemble_seeds) if method == "aevl" else [cfg.dataset.seed]
    out.manifest("train", cfg, seeds, t0, iso)
    print(f"{method}: {report}")
    return EXIT_OK


def load_table(path):
    """Read a table file written by ``train``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"table file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"table file is not valid JSON: {exc}") from None
    if "members" in doc:
        return EnsembleQ.from_dict(doc), "aevl", doc["members"][0].get("alpha", 0.0)
    if "bound_kind" in doc:
        return ConfidenceQ.from_dict(doc), doc.get("method", "ccvl"), doc.get("alpha", 0.0)
    return QTable.from_dict(doc), doc.get("method", "table"), doc.get("alpha", 0.0)


def _check_shape(trained, mdp, what: str):
    vals = trained.stack() if isinstance(trained, EnsembleQ) else trained.values
    if vals.shape[0] != mdp.num_states or vals.shape[1] != mdp.num_actions:
        raise ShapeMismatchError(
            f"{what} has {vals.shape[0]} states x {vals.shape[1]} actions but the evaluation "
            f"environment has {mdp.num_states} x {mdp.num_actions}"
        )


def cmd_eval(args) -> int:
    t0, iso = time.perf_counter(), _now()
    cfg = load_config(args.config, args.seed, "eval")
    test = cfg.eval_mdp()
    trained, method, alpha = load_table(args.tables)
    _check_shape(trained, test, "table")
    upper = None
    if args.upper:
        upper, _, _ = load_table(args.upper)
        if not isinstance(upper, ConfidenceQ) or upper.bound_kind != UPPER:
            raise ConfigError("--upper must point to an upper confidence table")
        _check_shape(upper, test, "upper table")
        if not isinstance(trained, ConfidenceQ) or upper.grid != trained.grid:
            raise ShapeMismatchError("upper and lower tables must share a confidence grid")
    policy = cfg.policy
    selected = None
    if args.fixed_ccvl:
        if not isinstance(trained, ConfidenceQ):
            raise ConfigError("--fixed-ccvl needs a confidence table")
        if not args.dataset:
            raise ConfigError("--fixed-ccvl needs --dataset to measure offline Bellman error")
        data = _load_dataset(args.dataset, cfg.train_mdp())
        selected = fixed_ccvl_select(trained, data, cfg.discount)
        policy = AdaptivePolicyConfig(**{**policy.__dict__, "mode": FIXED_DELTA, "delta_index": selected})
        method = "fixed-" + method
    opt = normalizer(cfg)
    out = Outputs(args.out)
    summaries = []
    for seed in cfg.eval.seeds:
        agent = make_agent(trained, policy, cfg.discount, upper)
        rep = evaluate(test, agent, cfg.eval.episodes, cfg.eval.horizon, seed, opt)
        stem = f"{method}_{alpha!r}_{seed}"
        if args.format == "csv":
            out.write(f"{stem}.csv", rep.episodes_csv())
            out.write(f"{stem}_trace.csv", rep.trace_csv())
        else:
            out.write(f"{stem}.json", _dump({"summary": rep.summary(), "returns": rep.per_episode_returns,
                                             "trace": [list(r) for r in rep.delta_trace]}))
        summaries.append({"seed": seed, **rep.summary()})
    out.write("summary.json", _dump({"method": method, "alpha": alpha, "selected_index": selected,
                                     "reports": summaries}))
    out.manifest("eval", cfg, cfg.eval.seeds, t0, iso)
    for s in summaries:
        print(f"seed {s['seed']}: normalized return {s['normalized_return']:.3f}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    t0, iso = time.perf_counter(), _now()
    cfg = load_config(args.config, args.seed, "coverage")
    cv = cfg.coverage
    report = coverage_experiment(cfg.train_mdp(), cfg.dataset, cfg.solver, cv.num_resamples, cv.deltas_to_check,
                                 cv.seed, cv.bound, jobs=args.jobs)
    out = Outputs(args.out)
    if args.format == "csv":
        out.write("coverage.csv", report.to_csv())
    else:
        out.write("coverage.json", _dump({"bound": report.bound, "rows": report.rows()}))
    out.manifest("coverage", cfg, [cv.seed], t0, iso)
    for r in report.rows():
        print(f"delta={r['delta']}: coverage {r['coverage']:.3f} over {r['resamples']} resamples "
              f"({r['failures']} failed)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    t0, iso = time.perf_counter(), _now()
    cfg = load_config(args.config, args.seed, "sweep")
    cells = alpha_sweep(cfg, jobs=args.jobs)
    out = Outputs(args.out)
    if args.format == "csv":
        out.write("sweep.csv", sweep_table_csv(cells))
        for c in cells:
            out.write(f"sweep/{c.method}_{c.alpha!r}_{c.seed}.csv", c.report.episodes_csv())
    else:
        out.write("sweep.json", _dump([c.row() for c in cells]))
    summary = summarize_sweep(cells)
    out.write("summary.json", _dump({m: {repr(a): v for a, v in by_a.items()} for m, by_a in summary.items()}))
    out.manifest("sweep", cfg, cfg.sweep.seeds, t0, iso)
    for m, by_a in summary.items():
        print(m + ": " + ", ".join(f"alpha={a:g} -> {v:.3f}" for a, v in by_a.items()))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccvl", description="Tabular confidence-conditioned offline RL experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False, fmt=True):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the command's seed(s)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent jobs")
        if fmt:
            sp.add_argument("--format", choices=("csv", "json"), default="csv")

    sp = sub.add_parser("config", help="print a bundled experiment config")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="gridworld")
    sp.add_argument("--out", default=None, help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("collect", help="collect an offline dataset")
    common(sp, fmt=False)
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="train a table on a dataset")
    common(sp)
    sp.add_argument("--dataset", required=True, help="JSONL dataset from 'collect'")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained table in the evaluation environment")
    common(sp)
    sp.add_argument("--tables", required=True, help="table file from 'train'")
    sp.add_argument("--upper", default=None, help="upper table for the safe-set policy")
    sp.add_argument("--dataset", default=None, help="dataset used by --fixed-ccvl")
    sp.add_argument("--fixed-ccvl", action="store_true",
                    help="act on the slice with the smallest offline Bellman error")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("coverage", help="Monte Carlo coverage of the lower bound")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_coverage)

    sp = sub.add_parser("sweep", help="alpha sweep over methods and seeds")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ShapeMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
