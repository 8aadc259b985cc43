"""Command-line entry point.

Subcommands: ``run`` (single experiment), ``sweep`` (parameter grid),
``verify`` (built-in self-checks).  Exit codes: 0 success, 1 check or
whole-sweep failure, 2 usage/config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_to_dict, load_config
from .errors import ConfigError, DivergenceError, FedRotError
from .federation import RunResult, run_sweep
from .verify import run_checks

__all__ = ["main", "cmd_run", "cmd_sweep", "cmd_verify"]

ROUNDS_COLUMNS = (
    "round",
    "loss",
    "agg_error",
    "dispersion",
    "alignment_gain",
    "rotation_deviation",
    "tau_diag",
    "wall_ms",
)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def _write_rounds_csv(path: Path, records) -> None:
    lines = [",".join(ROUNDS_COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, c)) for c in ROUNDS_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _summary_payload(result: RunResult, status: str = "ok") -> dict:
    records = result.rounds
    final = {
        "final_loss": records[-1].loss if records else None,
        "mean_agg_error": float(np.mean([r.agg_error for r in records]))
        if records
        else None,
        "rounds_completed": len(records),
        "wall_time_s": result.wall_time,
    }
    return {
        "status": status,
        "version": __version__,
        "seed": result.config.seed,
        "config": config_to_dict(result.config),
        "metrics": final,
    }


def _write_run_outputs(out_dir: Path, result: RunResult, status: str = "ok") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rounds_csv(out_dir / "rounds.csv", result.rounds)
    payload = _summary_payload(result, status=status)
    (out_dir / "summary.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


def _resolve_jobs(jobs: int | None) -> int:
    if jobs is not None:
        return max(1, jobs)
    env = os.environ.get("FEDROT_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FEDROT_THREADS must be an integer, got {env!r}")
    return 1


def cmd_run(config_path, out_dir, seed: int | None = None,
            jobs: int | None = None) -> int:
    del jobs  # a single run is sequential; accepted for interface symmetry
    from .federation import run_federation

    experiment = load_config(config_path).experiment
    if seed is not None:
        experiment = replace(experiment, seed=seed)
    out = Path(out_dir)
    try:
        result = run_federation(experiment)
    except DivergenceError as exc:
        if exc.partial is not None:
            _write_run_outputs(out, exc.partial, status="diverged")
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _write_run_outputs(out, result)
    return 0


def _cell_dir_name(index: int, params: dict, seed: int) -> str:
    parts = [f"{k}-{v.value if hasattr(v, 'value') else v}" for k, v in params.items()]
    return f"cell-{index:03d}_" + "_".join(parts + [f"seed-{seed}"])


def cmd_sweep(config_path, out_dir, jobs: int | None = None) -> int:
    parsed = load_config(config_path)
    if parsed.sweep is None:
        raise ConfigError("sweep command requires a 'sweep' section in the config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = run_sweep(
        parsed.experiment,
        parsed.sweep.grid,
        parsed.sweep.seeds,
        jobs=_resolve_jobs(jobs),
    )
    param_names = list(parsed.sweep.grid.keys())
    header = param_names + ["seed", "final_loss", "mean_agg_error", "status"]
    rows = [",".join(header)]
    n_failed = 0
    for index, cell in enumerate(cells):
        cell_dir = out / _cell_dir_name(index, cell.params, cell.seed)
        values = [
            str(v.value) if hasattr(v, "value") else _fmt(v)
            if isinstance(v, (int, float, np.integer, np.floating))
            else str(v)
            for v in (cell.params[name] for name in param_names)
        ]
        if cell.result is not None:
            _write_run_outputs(cell_dir, cell.result)
            records = cell.result.rounds
            row = values + [
                str(cell.seed),
                _fmt(records[-1].loss),
                _fmt(float(np.mean([r.agg_error for r in records]))),
                "ok",
            ]
        else:
            n_failed += 1
            status = (cell.error or "failed").split("\n")[0].replace(",", ";")
            row = values + [str(cell.seed), "nan", "nan", status]
        rows.append(",".join(row))
    (out / "sweep.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    if n_failed == len(cells):
        print("error: every sweep cell failed", file=sys.stderr)
        return 1
    return 0


def cmd_verify() -> int:
    results = run_checks()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'pass' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 1 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrot",
        description="Deterministic federated LoRA simulator with rotational "
        "alignment.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single experiment")
    p_run.add_argument("config", help="experiment file (YAML)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed")
    p_run.add_argument("--jobs", type=int, default=None, help="parallelism cap")

    p_sweep = sub.add_parser("sweep", help="run a parameter grid")
    p_sweep.add_argument("config", help="experiment file with a sweep section")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--jobs", type=int, default=None, help="parallel sweep cells")

    sub.add_parser("verify", help="run the built-in self-checks")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, seed=args.seed, jobs=args.jobs)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.out, jobs=args.jobs)
        return cmd_verify()
    except ConfigError as exc:
        where = ""
        if exc.line is not None:
            where = f" (line {exc.line}, column {exc.column})"
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FedRotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
