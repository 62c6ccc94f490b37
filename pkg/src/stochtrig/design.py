"""Trigger design: minimize ``sum_i tr(Pi_i Y_i)`` subject to ``P_bar(Y) <= Delta``.

The covariance constraint is encoded exactly by the linear matrix inequality
(with ``Y = diag(Y_1, ..., Y_m)``)::

    [ Q^-1 - S + C'R^-1 C   Q^-1 A         C'R^-1   ]
    [ A'Q^-1                A'Q^-1 A + S   0        ]  >= 0,   S >= Delta^-1,   Y_i >= 0
    [ R^-1 C                0              Y + R^-1 ]

which is solved with the barrier method in :mod:`stochtrig.sdp`.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.optimize as opt

from . import sdp
from .analysis import compute_bounds, lemma2_bounds, trace_weight
from .model import StationaryStats, SystemModel, stationary_stats
from .numerics import min_eigenvalue, symmetrize
from .trigger import TriggerDesign, comm_rates

log = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, MAX_ITERATIONS = sdp.OPTIMAL, sdp.INFEASIBLE, sdp.MAX_ITERATIONS


@dataclass(frozen=True, eq=False)
class SDPProblem:
    model: SystemModel
    Delta: np.ndarray
    Pi_blocks: tuple

    @classmethod
    def create(cls, model: SystemModel, Delta, stats: StationaryStats | None = None) -> "SDPProblem":
        Delta = np.asarray(Delta, dtype=float)
        if Delta.ndim == 0:
            Delta = float(Delta) * np.eye(model.n)
        Delta = symmetrize(Delta)
        if Delta.shape != (model.n, model.n):
            raise ValueError(f"Delta must be {model.n}x{model.n}")
        try:
            np.linalg.cholesky(Delta)
        except np.linalg.LinAlgError:
            raise ValueError("Delta must be positive definite") from None
        stats = stationary_stats(model) if stats is None else stats
        return cls(model=model, Delta=Delta, Pi_blocks=stats.Pi_blocks)

    @property
    def Delta_inv(self) -> np.ndarray:
        return symmetrize(la.cho_solve(la.cho_factor(self.Delta, lower=True), np.eye(self.model.n)))


@dataclass
class SDPSolution:
    Y_blocks: tuple
    S: np.ndarray
    objective: float
    status: str
    phase1_slack: float = float("nan")
    newton_steps: int = 0
    messages: list = field(default_factory=list)

    def design(self, eps: float = 1e-8) -> TriggerDesign:
        """Trigger design from the solution blocks, projected onto the PSD cone."""
        blocks = []
        for Y in self.Y_blocks:
            w, V = np.linalg.eigh(symmetrize(Y))
            blocks.append((V * np.maximum(w, 0.0)) @ V.T)
        return TriggerDesign(tuple(blocks), eps=eps)


def _lmi_constants(model: SystemModel):
    Qi = np.linalg.inv(model.Q)
    Ri = np.linalg.inv(model.R)
    A, C = model.A, model.C
    return symmetrize(Qi), symmetrize(Ri), A, C


def build_lmi(problem: SDPProblem, Y_blocks, S) -> np.ndarray:
    """Assemble the ``(2n + s)``-square constraint matrix for given ``Y`` and ``S``."""
    model = problem.model
    n, s = model.n, model.s
    Y_blocks = [np.atleast_2d(np.asarray(Y, dtype=float)) for Y in Y_blocks]
    if tuple(Y.shape[0] for Y in Y_blocks) != model.sensor_dims or any(Y.shape[0] != Y.shape[1] for Y in Y_blocks):
        raise ValueError(f"Y blocks must be square with sizes {model.sensor_dims}")
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape != (n, n):
        raise ValueError(f"S must be {n}x{n}")
    Qi, Ri, A, C = _lmi_constants(model)
    Y = la.block_diag(*Y_blocks)
    M = np.zeros((2 * n + s, 2 * n + s))
    M[:n, :n] = Qi - S + C.T @ Ri @ C
    M[:n, n:2 * n] = Qi @ A
    M[:n, 2 * n:] = C.T @ Ri
    M[n:2 * n, n:2 * n] = A.T @ Qi @ A + S
    M[2 * n:, 2 * n:] = Y + Ri
    M[n:2 * n, :n] = M[:n, n:2 * n].T
    M[2 * n:, :n] = M[:n, 2 * n:].T
    return symmetrize(M)


# -- variable layout: upper-triangular entries of each Y_i, then of S ----------

def _tri(d):
    return [(a, b) for a in range(d) for b in range(a, d)]


def _layout(model: SystemModel):
    y_vars = []
    idx = 0
    for i, d in enumerate(model.sensor_dims):
        y_vars.append([(idx + j, a, b) for j, (a, b) in enumerate(_tri(d))])
        idx += d * (d + 1) // 2
    s_vars = [(idx + j, a, b) for j, (a, b) in enumerate(_tri(model.n))]
    return y_vars, s_vars, idx + len(s_vars)


def _unpack(model: SystemModel, z):
    y_vars, s_vars, _ = _layout(model)
    Ys = []
    for d, vars_ in zip(model.sensor_dims, y_vars):
        Y = np.zeros((d, d))
        for j, a, b in vars_:
            Y[a, b] = Y[b, a] = z[j]
        Ys.append(Y)
    S = np.zeros((model.n, model.n))
    for j, a, b in s_vars:
        S[a, b] = S[b, a] = z[j]
    return tuple(Ys), S


def _pack(model: SystemModel, Y_blocks, S):
    y_vars, s_vars, k = _layout(model)
    z = np.zeros(k)
    for Y, vars_ in zip(Y_blocks, y_vars):
        for j, a, b in vars_:
            z[j] = Y[a, b]
    for j, a, b in s_vars:
        z[j] = S[a, b]
    return z


def _psd_sqrt(M) -> np.ndarray:
    w, V = np.linalg.eigh(symmetrize(M))
    return symmetrize((V * np.sqrt(np.maximum(w, 0.0))) @ V.T)


def _lmi_factors(model: SystemModel):
    """Whitened form of the covariance LMI.

    The congruence ``(u, w, r) = (Q^1/2 p - A w, w, R^1/2 q - C u)`` maps the
    LMI to ``diag(I, 0, I) + E2 S E2' - P S P' + Z Y Z'`` with
    ``P = E1 Q^1/2 - E2 A'`` and ``Z = E1 Q^1/2 C' - E2 A'C' - E3 R^1/2``.
    ``Q^-1`` never appears, so badly conditioned noise covariances do not
    squeeze the feasible set in the solver's coordinates.
    """
    n, s = model.n, model.s
    A, C = model.A, model.C
    Qh, Rh = _psd_sqrt(model.Q), _psd_sqrt(model.R)
    dim = 2 * n + s
    E2 = np.zeros((dim, n))
    E2[n:2 * n] = np.eye(n)
    P = np.zeros((dim, n))
    P[:n] = Qh
    P[n:2 * n] = -A.T
    Z = np.zeros((dim, s))
    Z[:n] = Qh @ C.T
    Z[n:2 * n] = -A.T @ C.T
    Z[2 * n:] = -Rh
    F0 = la.block_diag(np.eye(n), np.zeros((n, n)), np.eye(s))
    return F0, E2, P, Z


def _constraint_blocks(problem: SDPProblem, fixed_Y=None):
    """Constraint blocks over ``(Y, S)``, or over ``S`` alone when ``fixed_Y`` is given."""
    model = problem.model
    n = model.n
    y_vars, s_vars, k = _layout(model)
    offset = 0
    if fixed_Y is not None:
        offset = s_vars[0][0]
        k = len(s_vars)
    F0, E2, P, Z = _lmi_factors(model)

    s_plus, s_minus = sdp.TripletBuilder(k, n), sdp.TripletBuilder(k, n)
    for j, a, b in s_vars:
        s_plus.add_sym(j - offset, a, b, 1.0)
        s_minus.add_sym(j - offset, a, b, -1.0)
    terms = [s_plus.term(E2), s_minus.term(P)]
    if fixed_Y is None:
        yt = sdp.TripletBuilder(k, model.s)
        for vars_, start in zip(y_vars, model.offsets):
            for j, a, b in vars_:
                yt.add_sym(j, start + a, start + b, 1.0)
        terms.append(yt.term(Z))
    else:
        F0 = F0 + Z @ la.block_diag(*fixed_Y) @ Z.T
    blocks = [sdp.LMIBlock(F0, terms)]

    # S >= Delta^-1, whitened by Delta^1/2
    blocks.append(sdp.LMIBlock(-np.eye(n), [s_plus.term(_psd_sqrt(problem.Delta))]))

    if fixed_Y is None:
        # Y >= 0 as one block-diagonal constraint, scaled by Pi^1/2
        scale = la.block_diag(*[_psd_sqrt(Pi) for Pi in problem.Pi_blocks])
        blocks.append(sdp.LMIBlock(np.zeros((model.s, model.s)), [yt.term(scale)]))
    return blocks


def _objective(problem: SDPProblem):
    y_vars, _, k = _layout(problem.model)
    c = np.zeros(k)
    for vars_, Pi in zip(y_vars, problem.Pi_blocks):
        for j, a, b in vars_:
            c[j] = Pi[a, b] * (1.0 if a == b else 2.0)
    return c


def _caps(problem: SDPProblem, cap: float):
    """Phase-I bounds ``tr(Pi_i Y_i) <= cap`` that keep the margin problem bounded."""
    y_vars, _, k = _layout(problem.model)
    cb = sdp.TripletBuilder(k, len(y_vars))
    for i, (vars_, Pi) in enumerate(zip(y_vars, problem.Pi_blocks)):
        for j, a, b in vars_:
            cb.add(j, i, i, -Pi[a, b] * (1.0 if a == b else 2.0) / cap)
    return [sdp.LMIBlock(np.eye(len(y_vars)), [cb.term()], shift=False)]


def solve_sdp(problem: SDPProblem, config: sdp.SolverConfig | None = None,
              cap: float = 1e6, max_cap: float = 1e12) -> SDPSolution:
    """Optimal trigger blocks for one bound ``Delta``.

    ``cap`` bounds ``tr(Pi_i Y_i)`` during phase I only; it is raised by a
    factor of 100 when an infeasible verdict might be an artifact of the cap.
    """
    cfg = config or sdp.SolverConfig()
    model = problem.model
    blocks = _constraint_blocks(problem)
    c = _objective(problem)
    Y0 = [np.eye(d) / np.trace(Pi) for d, Pi in zip(model.sensor_dims, problem.Pi_blocks)]
    z0 = _pack(model, Y0, problem.Delta_inv)
    while True:
        res = sdp.solve(c, blocks, z0, cfg, phase1_caps=_caps(problem, cap))
        if res.status != INFEASIBLE or cap >= max_cap:
            break
        Ys, _ = _unpack(model, res.z)
        used = max(trace_weight([Pi], [Y]) for Pi, Y in zip(problem.Pi_blocks, Ys))
        if used < 0.5 * cap:
            break
        log.debug("phase I pressed against cap %g; retrying with a larger cap", cap)
        cap *= 100.0
    Ys, S = _unpack(model, res.z)
    return SDPSolution(Y_blocks=Ys, S=S, objective=res.objective, status=res.status,
                       phase1_slack=res.phase1_slack, newton_steps=res.newton_steps,
                       messages=list(res.messages))


def lmi_feasible(problem: SDPProblem, Y_blocks, config: sdp.SolverConfig | None = None):
    """Whether some ``S >= Delta^-1`` satisfies the LMI at fixed ``Y``.

    Returns ``(feasible, margin)`` where ``margin`` is the phase-I eigenvalue
    margin (in the solver's scaled coordinates).
    """
    cfg = config or sdp.SolverConfig()
    blocks = _constraint_blocks(problem, fixed_Y=[np.atleast_2d(Y) for Y in Y_blocks])
    z0 = _pack(problem.model, Y_blocks, problem.Delta_inv)[-len(_layout(problem.model)[1]):]
    z, tau, tau_upper, _ = sdp.phase1(blocks, z0, cfg)
    if tau > 0:
        return True, tau
    return tau_upper >= -cfg.infeasible_slack, tau_upper


@dataclass(frozen=True)
class DesignReport:
    ok: bool
    failures: tuple
    P_bar: np.ndarray
    delta_margin: float  # min eig(Delta - P_bar)
    lmi_margin: float  # min eig of the LMI at the solution
    rates: np.ndarray
    lemma2: tuple  # (f(u), m g(u/m))

    @property
    def total_rate(self) -> float:
        return float(np.sum(self.rates))


def verify_design(problem: SDPProblem, solution: SDPSolution, tol: float = 1e-6) -> DesignReport:
    """Recompute ``P_bar`` from the solution blocks and check it against ``Delta``."""
    model = problem.model
    design = solution.design()
    bounds = compute_bounds(model, design)
    delta_margin = min_eigenvalue(problem.Delta - bounds.P_bar)
    lmi_margin = min_eigenvalue(build_lmi(problem, solution.Y_blocks, solution.S))
    failures = []
    if solution.status != OPTIMAL:
        failures.append(f"solution status is {solution.status}")
    if delta_margin < -tol:
        failures.append(f"P_bar exceeds Delta (min eig of Delta - P_bar = {delta_margin:.3e})")
    if lmi_margin < -1e-7 * max(1.0, np.linalg.norm(build_lmi(problem, solution.Y_blocks, solution.S), 2)):
        failures.append(f"LMI not PSD (min eig {lmi_margin:.3e})")
    s_margin = min_eigenvalue(solution.S - problem.Delta_inv)
    if s_margin < -1e-7:
        failures.append(f"S below Delta^-1 (min eig {s_margin:.3e})")
    stats = StationaryStats(Sigma=None, Pi_blocks=problem.Pi_blocks)
    rates = comm_rates(stats, design)
    return DesignReport(ok=not failures, failures=tuple(failures), P_bar=bounds.P_bar,
                        delta_margin=delta_margin, lmi_margin=lmi_margin, rates=rates,
                        lemma2=lemma2_bounds(problem.Pi_blocks, design.blocks))


@dataclass(frozen=True)
class DesignPoint:
    delta: float
    status: str
    objective: float
    avg_rate: float
    Y_blocks: tuple


def _design_point(args):
    model, delta, stats, cfg = args
    problem = SDPProblem.create(model, delta, stats)
    sol = solve_sdp(problem, cfg)
    if sol.status != OPTIMAL:
        return DesignPoint(delta=delta, status=sol.status, objective=float("nan"),
                           avg_rate=float("nan"), Y_blocks=sol.Y_blocks)
    rates = comm_rates(stats, sol.design())
    return DesignPoint(delta=delta, status=sol.status, objective=sol.objective,
                       avg_rate=float(np.mean(rates)), Y_blocks=sol.Y_blocks)


def sweep_designs(model: SystemModel, delta_grid, config: sdp.SolverConfig | None = None,
                  workers: int = 1) -> list:
    """Solve the design problem with ``Delta = delta I`` for every grid value."""
    stats = stationary_stats(model)
    tasks = [(model, float(d), stats, config) for d in delta_grid]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_design_point, tasks))
    return [_design_point(t) for t in tasks]


class _RateFound(Exception):
    def __init__(self, point):
        self.point = point


def rate_delta_range(model: SystemModel, stats: StationaryStats | None = None):
    """``(lo, hi)`` for scalar ``delta``: infeasible below ``lo``, zero rate from ``hi`` on.

    ``lo`` is the largest eigenvalue of ``P_bar`` with every sensor always
    transmitting; ``hi`` the largest stationary variance.
    """
    stats = stats or stationary_stats(model)
    hi = float(np.max(np.linalg.eigvalsh(stats.Sigma)))
    full = compute_bounds(model, TriggerDesign.uniform([1e12] * model.m, model.sensor_dims))
    lo = float(np.max(np.linalg.eigvalsh(full.P_bar)))
    return lo, hi


def design_for_rate(model: SystemModel, target_rate: float, config: sdp.SolverConfig | None = None,
                    rate_tol: float = 2e-4, max_solves: int = 40, bracket=None,
                    stats: StationaryStats | None = None) -> DesignPoint:
    """Optimized design whose average rate is within ``rate_tol`` of the target.

    The optimal average rate decreases with ``delta``: it tends to one at the
    full-information limit of ``P_bar`` and is zero once ``delta`` reaches the
    largest stationary variance. Brent's method on ``log(delta)`` finds the
    crossing; infeasible trial points count as rate one. ``bracket`` is an
    optional pair of solved :class:`DesignPoint` values whose rates straddle
    the target, for example neighbours from :func:`sweep_designs`.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    stats = stats or stationary_stats(model)
    if bracket is None:
        lo, hi = rate_delta_range(model, stats)
        ends = {math.log(lo): 1.0 - target_rate, math.log(hi): -target_rate}
        tried = []
    else:
        a, b = sorted(bracket, key=lambda p: p.delta)
        rate_a = a.avg_rate if a.status == OPTIMAL else 1.0
        if not rate_a >= target_rate >= b.avg_rate:
            raise ValueError("bracket rates do not straddle the target")
        ends = {math.log(a.delta): rate_a - target_rate, math.log(b.delta): b.avg_rate - target_rate}
        tried = [p for p in (a, b) if p.status == OPTIMAL]
        close = [p for p in tried if abs(p.avg_rate - target_rate) <= rate_tol]
        if close:
            return min(close, key=lambda p: abs(p.avg_rate - target_rate))
    budget = len(tried) + max_solves

    def excess(log_delta):
        if log_delta in ends:
            return ends[log_delta]
        if len(tried) >= budget:
            raise _RateFound(None)
        pt = _design_point((model, math.exp(log_delta), stats, config))
        if pt.status != OPTIMAL:
            return 1.0 - target_rate
        tried.append(pt)
        if abs(pt.avg_rate - target_rate) <= rate_tol:
            raise _RateFound(pt)
        return pt.avg_rate - target_rate

    found = None
    u0, u1 = sorted(ends)
    try:
        opt.brentq(excess, u0, u1, xtol=1e-12, maxiter=max_solves)
    except _RateFound as hit:
        found = hit.point
    except RuntimeError:
        pass
    if found is None:
        if not tried:
            raise RuntimeError(f"no feasible design found for target rate {target_rate}")
        found = min(tried, key=lambda p: abs(p.avg_rate - target_rate))
        log.warning("rate %.4f reached only to %.4f after %d solves", target_rate, found.avg_rate, len(tried))
    return found
