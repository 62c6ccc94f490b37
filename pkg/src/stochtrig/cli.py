"""Command-line entry point.

Exit codes: 0 success, 1 certified infeasibility, 2 invalid input or config,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import compute_bounds
from .config import ConfigError, RunConfig, load_config
from .design import INFEASIBLE, OPTIMAL, SDPProblem, solve_sdp, verify_design
from .model import ModelError, stationary_stats, validate
from .numerics import NumericalError
from .sim import header_lines
from .trigger import comm_rates

EXIT_OK, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3
ORACLE_TOL = 1e-4
KURTOSIS_TOL = 1e-3

def _header(cfg: RunConfig) -> str:
    return header_lines(cfg.sha256(), cfg.experiment.seed)[0]


def _out_path(cfg: RunConfig, args, name: str) -> str:
    out_dir = args.out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _write_csv(path: str, header: str, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _matrix_rows(name, M):
    M = np.atleast_2d(M)
    return [(name, i, j, float(M[i, j])) for i in range(M.shape[0]) for j in range(M.shape[1])]


def _require_valid(cfg: RunConfig):
    report = validate(cfg.model)
    if not report.ok:
        raise ModelError(report.reasons)


# -- subcommands --------------------------------------------------------------------

def cmd_validate(cfg: RunConfig, args) -> int:
    report = validate(cfg.model)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_rate(cfg: RunConfig, args) -> int:
    _require_valid(cfg)
    design = cfg.trigger_design()
    stats = stationary_stats(cfg.model)
    rates = comm_rates(stats, design)
    rows = [(i, float(np.trace(stats.Pi_blocks[i])), float(rates[i])) for i in range(cfg.model.m)]
    _write_csv(_out_path(cfg, args, "rates.csv"), _header(cfg), ("sensor", "trace_Pi", "rate"), rows)
    for i, _, r in rows:
        print(f"sensor {i}: lambda = {r:.10g}")
    print(f"average rate {float(np.mean(rates)):.10g}")
    return EXIT_OK


def cmd_bounds(cfg: RunConfig, args) -> int:
    _require_valid(cfg)
    design = cfg.trigger_design()
    b = compute_bounds(cfg.model, design)
    rows = _matrix_rows("X_lower", b.X_lower) + _matrix_rows("X_upper", b.X_upper) + _matrix_rows("P_bar", b.P_bar)
    _write_csv(_out_path(cfg, args, "bounds.csv"), _header(cfg), ("quantity", "row", "col", "value"), rows)
    for name, M in (("X_lower", b.X_lower), ("X_upper", b.X_upper), ("P_bar", b.P_bar)):
        print(f"trace {name} = {float(np.trace(M)):.10g}")
    return EXIT_OK


def cmd_design(cfg: RunConfig, args) -> int:
    _require_valid(cfg)
    problem = SDPProblem.create(cfg.model, cfg.delta_matrix())
    sol = solve_sdp(problem)
    print(f"status {sol.status}")
    if sol.status == INFEASIBLE:
        print("infeasible: no trigger meets the covariance bound")
        for msg in sol.messages:
            print(f"  {msg}")
        return EXIT_INFEASIBLE
    if sol.status != OPTIMAL:
        for msg in sol.messages:
            print(f"  {msg}")
        return EXIT_NUMERICAL
    report = verify_design(problem, sol)
    rows = []
    for i, Y in enumerate(sol.Y_blocks):
        rows += [(f"Y{i}", r, c, v) for _, r, c, v in _matrix_rows("", Y)]
    rows += _matrix_rows("S", sol.S)
    path = _out_path(cfg, args, "design.csv")
    _write_csv(path, _header(cfg), ("quantity", "row", "col", "value"), rows)
    rate_rows = [(i, float(r)) for i, r in enumerate(report.rates)]
    _write_csv(_out_path(cfg, args, "design_rates.csv"), _header(cfg), ("sensor", "predicted_rate"), rate_rows)
    print(f"objective {sol.objective:.10g}")
    print(f"average predicted rate {float(np.mean(report.rates)):.10g}")
    print(f"min eig(Delta - P_bar) {report.delta_margin:.3e}")
    f_u, g_u = report.lemma2
    print(f"total rate {report.total_rate:.6g} (lower bound f(u) = {f_u:.6g}, upper bound m g(u/m) = {g_u:.6g})")
    if not report.ok:
        for msg in report.failures:
            print(f"verification failed: {msg}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    from .scenario import Scenario
    from .sim import percent_improvement, run_experiment, write_bounds_csv, write_improvement_csv, write_results_csv

    _require_valid(cfg)
    exp = cfg.experiment
    design = cfg.design or {}
    result = run_experiment(Scenario(cfg.model, cfg.model_label), rate_grid=exp.rates, trials=exp.trials,
                            horizon=exp.horizon, master_seed=exp.seed, burn_in=exp.burn_in,
                            schedules=exp.schedules, workers=exp.workers,
                            delta_grid=design.get("delta_grid"))
    header = [_header(cfg)]
    write_results_csv(_out_path(cfg, args, "results.csv"), result, header)
    write_bounds_csv(_out_path(cfg, args, "bound_curves.csv"), result, header)
    improvements = percent_improvement(result) if "random" in exp.schedules and len(exp.schedules) > 1 else []
    write_improvement_csv(_out_path(cfg, args, "improvement.csv"), improvements, header)
    print(f"{'schedule':<10} {'rate':>5} {'emp. rate':>9} {'trace P-':>10} {'mse':>10}")
    for r in result.records:
        print(f"{r.schedule:<10} {r.target_rate:>5.2f} {r.empirical_rate:>9.4f} "
              f"{r.trace_prior_cov:>10.5f} {r.empirical_mse:>10.5f}")
    for p in improvements:
        print(f"improvement over random, {p.schedule} at {p.target_rate:.2f}: {p.percent:.2f}% (se {p.percent_se:.2f})")
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    from .oracle import equivalence_check

    _require_valid(cfg)
    if cfg.model.n > 2:
        raise ConfigError("oracle-check supports at most two states")
    exp = cfg.experiment
    report = equivalence_check(cfg.model, cfg.trigger_design(), steps=exp.oracle_steps, points=exp.oracle_points)
    rows = [("|".join("".join(str(g) for g in step) for step in n.pattern), n.mean_error, n.cov_error, n.kurtosis)
            for n in report.nodes]
    _write_csv(_out_path(cfg, args, "oracle.csv"), _header(cfg),
               ("pattern", "mean_rel_error", "cov_rel_error", "excess_kurtosis"), rows)
    print(f"nodes checked {len(report.nodes)}")
    print(f"max mean deviation {report.max_mean_error:.3e}")
    print(f"max covariance deviation {report.max_cov_error:.3e}")
    print(f"max |excess kurtosis| {report.max_kurtosis:.3e}")
    ok = max(report.max_mean_error, report.max_cov_error) <= ORACLE_TOL and report.max_kurtosis <= KURTOSIS_TOL
    print("oracle agreement " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {
    "validate": cmd_validate,
    "rate": cmd_rate,
    "bounds": cmd_bounds,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out-dir", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    common.add_argument("--trials", type=int, help="Monte Carlo trials (overrides experiment.trials)")
    common.add_argument("--horizon", type=int, help="steps per trial (overrides experiment.horizon)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(prog="stochtrig", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stochtrig {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "trials": args.trials, "horizon": args.horizon}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ModelError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"cannot read or write: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
