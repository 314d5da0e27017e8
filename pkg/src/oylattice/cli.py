"""Command-line front end: ``oy-lattice list | run | replay``.

Exit codes: 0 when every threshold passed, 1 when any failed, 2 on a
configuration or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import InstabilityError
from .estimators import ReplicaAbort
from .experiments import REGISTRY, ConfigError, ExperimentConfig, ExperimentResult, run

CSV_COLUMNS = ("experiment", "functional", "replica", "n", "l_or_eps", "t", "value")


def _num(v):
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def summary_dict(result: ExperimentResult) -> dict:
    return _jsonable({
        "experiment": result.experiment,
        "status": "ok",
        "passed": result.passed,
        "checks": [
            {"name": c.name, "measured": c.measured, "threshold": c.threshold,
             "relation": c.relation, "passed": c.passed}
            for c in result.checks
        ],
        "metrics": result.metrics,
    })


def manifest_dict(cfg: ExperimentConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def write_outputs(out: Path, cfg: ExperimentConfig, result: ExperimentResult | None, summary: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if result is not None:
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for functional, replica, n, l_or_eps, t, value in result.rows:
                w.writerow([result.experiment, functional, replica, n, _num(l_or_eps), _num(t), _num(value)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config_file(path: str) -> dict:
    data = json.loads(Path(path).read_text())
    if "config" in data and isinstance(data["config"], dict):  # a run manifest
        data = data["config"]
    return data


def build_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        data = load_config_file(args.config)
        named = data.get("experiment", args.experiment)
        if named != args.experiment:
            raise ConfigError([f"config file is for {named!r}, not {args.experiment!r}"])
    if args.experiment not in REGISTRY:
        raise ConfigError([f"unknown experiment {args.experiment!r}; choose from {sorted(REGISTRY)}"])
    data = {**REGISTRY[args.experiment].defaults, **data}
    flags = {
        "n_grid": args.n, "dt": args.dt, "replicas": args.replicas, "master_seed": args.seed,
        "out": args.out, "workers": args.workers, "J": args.J,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    if args.T_macro is not None:
        data["T_macro"], data["T_micro"] = args.T_macro, None
    if args.T_micro is not None:
        data["T_micro"], data["T_macro"] = args.T_micro, None
    data["experiment"] = args.experiment
    return ExperimentConfig.from_dict(data)


def execute(cfg: ExperimentConfig, out: Path | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    problems = cfg.violations()
    if problems:
        print("invalid configuration:", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    out = Path(out or cfg.out or Path("results") / cfg.experiment)
    try:
        result = run(cfg)
    except ReplicaAbort as exc:
        done = 0 if exc.partial is None else len(next(iter(exc.partial.values())))
        summary = {"experiment": cfg.experiment, "status": "aborted", "passed": False,
                   "partial": True, "completed_replicas": done,
                   "abort": {"replica": exc.replica, "step": exc.step, "message": str(exc)}}
        write_outputs(out, cfg, None, summary)
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except (InstabilityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_outputs(out, cfg, result, summary_dict(result))
    for c in result.checks:
        print(c.line(), file=stream)
    print(f"{cfg.experiment}: {'PASS' if result.passed else 'FAIL'} (outputs in {out})", file=stream)
    return 0 if result.passed else 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oy-lattice", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="show the experiment registry")

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("experiment")
    r.add_argument("--config", help="JSON config file or run manifest")
    r.add_argument("--n", type=int, nargs="+", help="n values (replaces the default grid)")
    r.add_argument("--dt", type=float)
    r.add_argument("--replicas", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.add_argument("--J", type=int)
    r.add_argument("--T-macro", dest="T_macro", type=float)
    r.add_argument("--T-micro", dest="T_micro", type=float)

    rp = sub.add_parser("replay", help="re-run from a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out")
    rp.add_argument("--workers", type=int)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        width = max(len(k) for k in REGISTRY)
        for name, exp in REGISTRY.items():
            print(f"{name:<{width}}  {exp.claim}")
        return 0
    try:
        if args.command == "replay":
            data = load_config_file(args.manifest)
            if args.workers is not None:
                data["workers"] = args.workers
            cfg = ExperimentConfig.from_dict(data)
            return execute(cfg, args.out)
        cfg = build_config(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return execute(cfg)


if __name__ == "__main__":
    sys.exit(main())
