"""Command line interface: ``localexplore {run,eval,diag,grid}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .diagnostics import run_diagnostics, write_diagnostics
from .harness import (
    OUT_ENV,
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    evaluate_record,
    load_config,
    out_dir_from_env,
    run_experiment,
)
from .records import read_run
from .systems import SYSTEMS

USAGE_ERROR = 2

# flag name -> config key
_RUN_FLAGS = {
    "system": "system",
    "strategy": "strategy",
    "steps": "total_steps",
    "runs": "n_runs",
    "seed": "seed",
    "rmse_samples": "n_rmse_samples",
    "checkpoint": "checkpoint_every",
    "horizon": "horizon",
    "apply": "apply_count",
    "workers": "workers",
    "out": "out_dir",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="localexplore",
        description="Localized active learning of GP state-space models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an exploration experiment")
    run.add_argument("--config", help="flat 'key = value' config file")
    run.add_argument("--system", help=f"one of: {', '.join(SYSTEMS)}")
    run.add_argument("--strategy", help="local, entropy or both")
    run.add_argument("--steps", type=int, help="time steps per run")
    run.add_argument("--runs", type=int, help="number of independent runs")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--rmse-samples", dest="rmse_samples", type=int)
    run.add_argument("--checkpoint", type=int, help="steps between RMSE checkpoints")
    run.add_argument("--horizon", type=int, help="MPC horizon")
    run.add_argument("--apply", type=int, help="inputs applied per MPC solve")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config key")

    ev = sub.add_parser("eval", help="recompute the final RMSE of a saved run")
    ev.add_argument("run_csv")

    dg = sub.add_parser("diag", help="write the information-loss bound diagnostics of a run")
    dg.add_argument("run_csv")
    dg.add_argument("--out", help="diagnostics CSV path (default: <run>_diag.csv)")

    gr = sub.add_parser("grid", help="dump the region-of-interest reference points")
    gr.add_argument("--system", required=True)
    gr.add_argument("--config", help="config file for grid resolution and seed")
    gr.add_argument("--per-dim", dest="per_dim", type=int)
    gr.add_argument("--cap", type=int)
    gr.add_argument("--seed", type=int)
    gr.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _experiment_config(args) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"out_dir": out_dir_from_env(base.out_dir)}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in _RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    return ExperimentConfig.from_mapping(overrides, base)


def _cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg)
    for strategy, median in report.final_medians().items():
        print(f"{strategy}: median final RMSE {median:.6g} over "
              f"{sum(r.ok for r in report.records[strategy])} runs")
    print(f"aggregate: {report.aggregate_path}")
    return 0


def _cmd_eval(args) -> int:
    rec = read_run(args.run_csv)
    value = evaluate_record(rec)
    print(f"recomputed {value!r}")
    print(f"stored     {rec.final_rmse!r}")
    print(f"abs diff   {abs(value - rec.final_rmse):.3g}")
    return 0


def _cmd_diag(args) -> int:
    rec = read_run(args.run_csv)
    rows = run_diagnostics(rec)
    out = args.out or str(Path(args.run_csv).with_suffix("")) + "_diag.csv"
    write_diagnostics(rows, out)
    viol = sum(r["delta_I"] > r["bound_a_priori"] for r in rows)
    fit = rows[0]["L_fitted"] if rows else float("nan")
    print(f"{len(rows)} replan events, {viol} a-priori bound violations, L_fitted={fit:.6g}")
    print(f"diagnostics: {out}")
    return 0


def _cmd_grid(args) -> int:
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"system": args.system}
    for flag, key in (("per_dim", "grid_per_dim"), ("cap", "grid_cap"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            overrides[key] = str(getattr(args, flag))
    cfg = ExperimentConfig.from_mapping(overrides, base)
    system = cfg.make_system()
    region = cfg.make_region(system)
    header = [f"x_{i + 1}" for i in range(system.d_x)] + [f"u_{i + 1}" for i in range(system.d_u)]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in region.ref_points:
            w.writerow([repr(float(v)) for v in p])
    finally:
        if args.out:
            fh.close()
    return 0


_COMMANDS = {"run": _cmd_run, "eval": _cmd_eval, "diag": _cmd_diag, "grid": _cmd_grid}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"localexplore: error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError) as err:
        print(f"localexplore: error: {err}", file=sys.stderr)
        return 1
    except ExperimentError as err:
        print(f"localexplore: experiment failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
