"""Monte Carlo comparison of random, uniform stochastic and optimized triggers.

Every trial owns an RNG substream spawned from the master seed, so trial ``j``
sees the same plant noise and trigger uniforms under every schedule and rate
point (common random numbers). Trials run in fixed blocks of
:data:`TRIAL_BLOCK`; the block layout never depends on the worker count, which
keeps results bit-identical between serial and parallel runs.

Reported quantities are averaged over trials and over the steps after burn-in:
``trace_prior_cov`` is the mean of ``tr(P_k^-)`` and ``empirical_mse`` the
mean of ``|x_k - x_k^-|^2``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import compute_bounds
from .design import DesignPoint, design_for_rate, rate_delta_range, sweep_designs
from .filtering import batch_intermittent_update, batch_time_update, batch_trigger_update
from .model import SystemModel, sample_noise, stationary_stats
from .numerics import riccati_fixed_point
from .scenario import Scenario
from .trigger import TriggerDesign, decide, uniform_rate_design

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("random", "uniform", "optimized")
TRIAL_BLOCK = 100
DEFAULT_TRIALS = 10_000
DEFAULT_HORIZON = 500
DEFAULT_BURN_IN = 100
DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class SchedulePlan:
    """One filter configuration: a schedule kind at a target rate."""

    kind: str
    target_rate: float
    design: TriggerDesign | None = None
    delta: float = float("nan")  # scalar bound behind an optimized design

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError(f"target rate {self.target_rate} outside (0, 1]")
        if self.kind != "random" and self.target_rate < 1.0 and self.design is None:
            raise ValueError(f"{self.kind} schedule needs a trigger design")

    @property
    def always(self) -> bool:
        return self.target_rate >= 1.0


@dataclass(frozen=True)
class RatePointResult:
    schedule: str
    target_rate: float
    empirical_rate: float  # average over sensors
    sensor_rates: np.ndarray
    trace_prior_cov: float
    trace_se: float
    empirical_mse: float
    mse_se: float
    trials: int
    horizon: int
    burn_in: int
    delta: float = float("nan")
    per_trial_trace: np.ndarray = field(default=None, repr=False)
    per_trial_mse: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class BoundCurvePoint:
    target_rate: float
    trace_lower: float  # tr of the fixed point of g_R
    trace_upper: float  # tr of the fixed point of g_{R + Y^-1} for the uniform design


@dataclass(frozen=True)
class ImprovementPoint:
    target_rate: float
    schedule: str
    percent: float
    percent_se: float


@dataclass(frozen=True)
class AggregateResult:
    records: tuple
    bounds: tuple
    label: str
    master_seed: int
    trials: int
    horizon: int
    burn_in: int

    def get(self, schedule: str, rate: float) -> RatePointResult:
        for r in self.records:
            if r.schedule == schedule and math.isclose(r.target_rate, rate):
                return r
        raise KeyError((schedule, rate))

    def series(self, schedule: str) -> list:
        return sorted((r for r in self.records if r.schedule == schedule), key=lambda r: r.target_rate)

    @property
    def schedules(self) -> tuple:
        return tuple(dict.fromkeys(r.schedule for r in self.records))


# -- trial data -----------------------------------------------------------------

def trial_seeds(master_seed: int, trials: int) -> list:
    return np.random.SeedSequence(master_seed).spawn(trials)


def draw_block(model: SystemModel, seeds, horizon: int):
    """Plant states, measurements and trigger uniforms for a block of trials.

    Each trial consumes its own stream in the order ``x0, w, v, zeta``.
    """
    B = len(seeds)
    x0 = np.empty((B, model.n))
    w = np.empty((B, horizon, model.n))
    v = np.empty((B, horizon, model.s))
    zeta = np.empty((B, horizon, model.m))
    for b, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        x0[b], w[b], v[b] = sample_noise(model, horizon, rng)
        zeta[b] = rng.random((horizon, model.m))
    x = np.empty((B, horizon, model.n))
    x[:, 0] = x0
    for k in range(horizon - 1):
        x[:, k + 1] = x[:, k] @ model.A.T + w[:, k]
    y = x @ model.C.T + v
    return x, y, zeta


def _decisions(plan: SchedulePlan, y, zeta) -> np.ndarray:
    if plan.always:
        return np.ones(zeta.shape)
    if plan.kind == "random":
        return (zeta < plan.target_rate).astype(float)
    return decide(y, plan.design, zeta).astype(float)


def filter_block(model: SystemModel, plan: SchedulePlan, x, y, zeta, burn_in: int):
    """Run the schedule's filter on a block; per-trial ``(trace, mse, sensor_rates)``."""
    B, horizon, _ = x.shape
    gamma = _decisions(plan, y, zeta)
    rows = np.repeat(np.arange(model.m), model.sensor_dims)
    C, R = model.C, model.R
    Y_inv = None if plan.kind == "random" or plan.always else plan.design.Y_inv
    xh = np.zeros((B, model.n))
    P = np.broadcast_to(model.Sigma0, (B, model.n, model.n)).copy()
    trace_sum = np.zeros(B)
    err_sum = np.zeros(B)
    for k in range(horizon):
        if k > 0:
            xh, P = batch_time_update(xh, P, model.A, model.Q)
        if k >= burn_in:
            trace_sum += np.trace(P, axis1=1, axis2=2)
            err_sum += np.sum((x[:, k] - xh) ** 2, axis=1)
        psi = gamma[:, k][:, rows]
        if Y_inv is None:
            xh, P = batch_intermittent_update(xh, P, y[:, k], psi, C, R)
        else:
            xh, P = batch_trigger_update(xh, P, y[:, k], psi, C, R, Y_inv)
    steps = horizon - burn_in
    return trace_sum / steps, err_sum / steps, gamma[:, burn_in:].mean(axis=1)


def _run_block(args):
    model, plans, seeds, horizon, burn_in = args
    x, y, zeta = draw_block(model, seeds, horizon)
    return [filter_block(model, plan, x, y, zeta, burn_in) for plan in plans]


def run_plans(model: SystemModel, plans, trials: int, horizon: int = DEFAULT_HORIZON,
              burn_in: int = DEFAULT_BURN_IN, master_seed: int = 0, workers: int = 1) -> list:
    """Per-trial statistics for every plan, from shared trial streams."""
    if trials < 2:
        raise ValueError("need at least two trials for standard errors")
    if not 0 <= burn_in < horizon:
        raise ValueError("burn_in must lie in [0, horizon)")
    seeds = trial_seeds(master_seed, trials)
    tasks = [(model, list(plans), seeds[i:i + TRIAL_BLOCK], horizon, burn_in)
             for i in range(0, trials, TRIAL_BLOCK)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_run_block, tasks))
    else:
        blocks = [_run_block(t) for t in tasks]
    out = []
    for j, plan in enumerate(plans):
        trace = np.concatenate([blk[j][0] for blk in blocks])
        mse = np.concatenate([blk[j][1] for blk in blocks])
        rates = np.concatenate([blk[j][2] for blk in blocks])
        out.append((plan, trace, mse, rates))
    return out


def _summarize(plan: SchedulePlan, trace, mse, rates, horizon, burn_in) -> RatePointResult:
    n = trace.shape[0]
    sensor_rates = rates.mean(axis=0)
    return RatePointResult(
        schedule=plan.kind, target_rate=plan.target_rate,
        empirical_rate=float(sensor_rates.mean()), sensor_rates=sensor_rates,
        trace_prior_cov=float(trace.mean()), trace_se=float(trace.std(ddof=1) / math.sqrt(n)),
        empirical_mse=float(mse.mean()), mse_se=float(mse.std(ddof=1) / math.sqrt(n)),
        trials=n, horizon=horizon, burn_in=burn_in, delta=plan.delta,
        per_trial_trace=trace, per_trial_mse=mse)


# -- designs per rate point -----------------------------------------------------

def default_delta_grid(model: SystemModel, points: int = 16) -> np.ndarray:
    """Log-spaced ``delta`` values strictly inside the feasible, nonzero-rate range."""
    lo, hi = rate_delta_range(model)
    return np.exp(np.linspace(math.log(lo * 1.001), math.log(hi), points))


def match_designs(model: SystemModel, rates, sweep: list, refine: bool = True,
                  rate_tol: float = 2e-4, sdp_config=None) -> dict:
    """Pick an optimized design per target rate from a ``delta`` sweep.

    The sweep point with the nearest average rate is taken; with ``refine``
    and a miss larger than ``rate_tol``, the bracketing pair of sweep points
    seeds a root search in ``delta`` for the exact rate.
    """
    solved = sorted((p for p in sweep if p.status == "optimal"), key=lambda p: p.delta)
    if not solved:
        raise RuntimeError("no feasible point in the delta sweep")
    infeasible = [p for p in sweep if p.status != "optimal"]
    stats = stationary_stats(model)
    out = {}
    for rate in rates:
        best = min(solved, key=lambda p: abs(p.avg_rate - rate))
        if refine and abs(best.avg_rate - rate) > rate_tol:
            above = [p for p in solved if p.avg_rate >= rate]
            below = [p for p in solved if p.avg_rate <= rate]
            if above and below:
                bracket = (max(above, key=lambda p: p.delta), min(below, key=lambda p: p.delta))
            elif below and infeasible:
                bracket = (max(infeasible, key=lambda p: p.delta), min(below, key=lambda p: p.delta))
            else:
                bracket = None
            best = design_for_rate(model, rate, sdp_config, rate_tol=rate_tol, bracket=bracket, stats=stats)
        out[rate] = best
    return out


def _optimized_trigger(point: DesignPoint) -> TriggerDesign:
    return TriggerDesign(tuple(np.atleast_2d(Y) for Y in point.Y_blocks))


def bound_curves(model: SystemModel, rates) -> tuple:
    """Trace envelopes of the a-priori covariance for the uniform design at each rate."""
    stats = stationary_stats(model)
    lower = float(np.trace(riccati_fixed_point(model.A, model.C, model.Q, model.R)))
    out = []
    for rate in rates:
        if rate >= 1.0:
            out.append(BoundCurvePoint(rate, lower, lower))
            continue
        bounds = compute_bounds(model, uniform_rate_design(stats, rate))
        out.append(BoundCurvePoint(rate, float(np.trace(bounds.X_lower)), float(np.trace(bounds.X_upper))))
    return tuple(out)


def run_experiment(scenario, rate_grid=DEFAULT_RATES, trials: int = DEFAULT_TRIALS,
                   horizon: int = DEFAULT_HORIZON, master_seed: int = 0,
                   burn_in: int = DEFAULT_BURN_IN, schedules=SCHEDULE_KINDS, workers: int = 1,
                   delta_grid=None, refine: bool = True, sdp_config=None) -> AggregateResult:
    """Trace and MSE of every schedule at every rate point, plus bound curves.

    ``scenario`` is a :class:`Scenario` or a bare :class:`SystemModel`.
    Rate 1.0 is the always-transmit point where every schedule reduces to the
    standard Kalman filter.
    """
    model = scenario.model if isinstance(scenario, Scenario) else scenario
    label = scenario.label if isinstance(scenario, Scenario) else "model"
    rates = [float(r) for r in rate_grid]
    if any(not 0.0 < r <= 1.0 for r in rates):
        raise ValueError("rates must lie in (0, 1]")
    bad = set(schedules) - set(SCHEDULE_KINDS)
    if bad:
        raise ValueError(f"unknown schedules {sorted(bad)}")
    stats = stationary_stats(model)
    plans = []
    interior = [r for r in rates if r < 1.0]
    optimized = {}
    if "optimized" in schedules and interior:
        grid = default_delta_grid(model) if delta_grid is None else np.asarray(delta_grid, dtype=float)
        sweep = sweep_designs(model, grid, sdp_config, workers=workers)
        optimized = match_designs(model, interior, sweep, refine=refine, sdp_config=sdp_config)
    for rate in rates:
        for kind in schedules:
            if rate >= 1.0 or kind == "random":
                plans.append(SchedulePlan(kind, rate))
            elif kind == "uniform":
                plans.append(SchedulePlan(kind, rate, uniform_rate_design(stats, rate)))
            else:
                pt = optimized[rate]
                plans.append(SchedulePlan(kind, rate, _optimized_trigger(pt), delta=pt.delta))
    runs = run_plans(model, plans, trials, horizon, burn_in, master_seed, workers)
    records = tuple(_summarize(plan, tr, mse, rt, horizon, burn_in) for plan, tr, mse, rt in runs)
    return AggregateResult(records=records, bounds=bound_curves(model, rates), label=label,
                           master_seed=master_seed, trials=trials, horizon=horizon, burn_in=burn_in)


# -- comparisons ----------------------------------------------------------------

def paired_difference(a: RatePointResult, b: RatePointResult, metric: str = "trace"):
    """Mean and standard error of ``a - b`` over trials sharing random numbers."""
    attr = "per_trial_trace" if metric == "trace" else "per_trial_mse"
    da, db = getattr(a, attr), getattr(b, attr)
    if da is None or db is None or da.shape != db.shape:
        raise ValueError("paired comparison needs per-trial values over the same trials")
    d = da - db
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.shape[0]))


def percent_improvement(results: AggregateResult, baseline: str = "random", metric: str = "trace") -> list:
    """``100 (baseline - design) / baseline`` for every other schedule at every rate."""
    base = {r.target_rate: r for r in results.series(baseline)}
    out = []
    for sched in results.schedules:
        if sched == baseline:
            continue
        series = results.series(sched)
        if sorted(r.target_rate for r in series) != sorted(base):
            raise ValueError(f"rate grids of {sched} and {baseline} differ")
        for r in series:
            b = base[r.target_rate]
            ref = b.trace_prior_cov if metric == "trace" else b.empirical_mse
            diff, se = paired_difference(b, r, metric)
            out.append(ImprovementPoint(r.target_rate, sched, 100.0 * diff / ref, 100.0 * se / ref))
    return out


# -- CSV output -----------------------------------------------------------------

RESULT_COLUMNS = ("schedule", "target_rate", "empirical_rate", "trace_prior_cov", "empirical_mse",
                  "trials", "horizon")


def header_lines(config_sha256: str, master_seed: int) -> list:
    """Single comment line identifying the tool version, config and seed."""
    return [f"# stochtrig {__version__} config_sha256={config_sha256} seed={master_seed}"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path, header, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_results_csv(path, results: AggregateResult, header=()):
    rows = [(r.schedule, r.target_rate, r.empirical_rate, r.trace_prior_cov, r.empirical_mse,
             r.trials, r.horizon) for r in results.records]
    _write(path, header, RESULT_COLUMNS + ("trace_se", "mse_se", "delta"),
           [row + (r.trace_se, r.mse_se, r.delta) for row, r in zip(rows, results.records)])


def write_improvement_csv(path, improvements, header=()):
    _write(path, header, ("schedule", "target_rate", "percent_improvement", "percent_se"),
           [(p.schedule, p.target_rate, p.percent, p.percent_se) for p in improvements])


def write_bounds_csv(path, results: AggregateResult, header=()):
    _write(path, header, ("target_rate", "trace_lower", "trace_upper"),
           [(b.target_rate, b.trace_lower, b.trace_upper) for b in results.bounds])
