"""Small dense semidefinite programs by log-det barrier path following.

Problems have the form::

    minimize    c'z
    subject to  F_j(z) = F0_j + sum_t U_tj X_tj(z) U_tj' >= 0   for each block j

where each ``X_t(z)`` is a small symmetric matrix whose entries are linear in
``z``, stored as ``(row, col, value)`` triplets per variable. Writing the
variables through congruence factors ``U_t`` lets callers whiten badly scaled
problem data once, while gradients and Hessians of ``-log det F`` still reduce
to gathers from the small matrices ``U_t' F^-1 U_u``::

    d/dz_i        = -tr(F^-1 dF_i)
    d2/dz_i dz_l  =  tr(F^-1 dF_i F^-1 dF_l)

A strictly feasible start comes from a phase-I problem that maximizes a
common eigenvalue margin ``tau`` with ``F_j(z) - tau I >= 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy import sparse

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"


@dataclass
class Term:
    """``U X(z) U'`` with ``X(z)`` given by triplets of shape ``(num_vars, T)``.

    Variable ``i`` contributes ``vals[i, t]`` at ``(rows[i, t], cols[i, t])``
    of ``X``; padding triplets carry value zero.
    """

    U: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.active = np.flatnonzero(np.any(self.vals != 0, axis=1))
        a = self.active
        # contiguous variable ranges index faster as slices
        self.sel = slice(a[0], a[-1] + 1) if a.size and a[-1] - a[0] + 1 == a.size else a
        self.r = self.rows[self.active]
        self.c = self.cols[self.active]
        self.v = self.vals[self.active]
        p = self.inner_dim
        rows = np.repeat(np.arange(self.active.size), self.v.shape[1])
        self.lift = sparse.csr_matrix((self.v.ravel(), (rows, (self.r * p + self.c).ravel())),
                                      shape=(self.active.size, p * p))
        # transposed basis matrices X_i' stacked over active variables
        self.basis_t = self.lift.toarray().reshape(-1, p, p).transpose(0, 2, 1).copy()

    @property
    def inner_dim(self) -> int:
        return self.U.shape[1]

    def matrix(self, z) -> np.ndarray:
        p = self.inner_dim
        X = np.zeros((p, p))
        np.add.at(X, (self.r, self.c), self.v * z[self.active, None])
        return X


class TripletBuilder:
    """Collects ``(var, row, col, value)`` entries for one :class:`Term`."""

    def __init__(self, num_vars: int, dim: int):
        self.num_vars = num_vars
        self.dim = dim
        self.entries = [[] for _ in range(num_vars)]

    def add(self, var: int, row: int, col: int, value: float):
        self.entries[var].append((row, col, value))

    def add_sym(self, var: int, row: int, col: int, value: float):
        """Add ``value`` at ``(row, col)`` and its mirror, once on the diagonal."""
        self.add(var, row, col, value)
        if row != col:
            self.add(var, col, row, value)

    def term(self, U=None) -> Term:
        T = max([1] + [len(e) for e in self.entries])
        rows = np.zeros((self.num_vars, T), dtype=np.intp)
        cols = np.zeros((self.num_vars, T), dtype=np.intp)
        vals = np.zeros((self.num_vars, T))
        for i, ent in enumerate(self.entries):
            for t, (r, c, v) in enumerate(ent):
                rows[i, t], cols[i, t], vals[i, t] = r, c, v
        U = np.eye(self.dim) if U is None else np.asarray(U, dtype=float)
        if U.shape[1] != self.dim:
            raise ValueError(f"U has {U.shape[1]} columns, expected {self.dim}")
        return Term(U=U, rows=rows, cols=cols, vals=vals)


@dataclass
class LMIBlock:
    """Constraint ``F0 + sum_t U_t X_t(z) U_t' >= 0``.

    ``shift`` marks blocks that receive the phase-I margin variable.
    """

    F0: np.ndarray
    terms: list
    shift: bool = True

    def __post_init__(self):
        self.F0 = np.asarray(self.F0, dtype=float)
        for t in self.terms:
            if t.U.shape[0] != self.F0.shape[0]:
                raise ValueError("term factor rows must match the block dimension")

    @property
    def dim(self) -> int:
        return self.F0.shape[0]

    def assemble(self, z, tau: float = 0.0) -> np.ndarray:
        F = self.F0.copy()
        for t in self.terms:
            F += t.U @ t.matrix(z) @ t.U.T
        if tau and self.shift:
            F[np.diag_indices_from(F)] -= tau
        return 0.5 * (F + F.T)

    def without_shift(self) -> "LMIBlock":
        return LMIBlock(self.F0, self.terms, shift=False)


@dataclass
class SolverConfig:
    gap_rel: float = 1e-10
    gap_abs: float = 1e-12
    mu: float = 5.0  # barrier weight growth per outer step
    newton_tol: float = 1e-7  # half the squared Newton decrement
    max_newton: int = 100
    stall_steps: int = 3
    max_outer: int = 200
    infeasible_slack: float = 1e-9


@dataclass
class SDPResult:
    z: np.ndarray
    objective: float
    status: str
    phase1_slack: float
    newton_steps: int = 0
    gap: float = float("nan")
    messages: list = field(default_factory=list)


def _pair_hessian(ta: Term, tb: Term, M):
    """Hessian block ``tr(F^-1 dF_i F^-1 dF_l)`` for variables of two terms.

    With ``M = U_a' F^-1 U_b`` the entry is ``tr(X_i M X_l M') = <X_l, M' X_i' M>``.
    """
    T = M.T @ ta.basis_t @ M
    return (tb.lift @ T.reshape(T.shape[0], -1).T).T


def _block(ta: Term, tb: Term):
    if isinstance(ta.sel, slice) and isinstance(tb.sel, slice):
        return ta.sel, tb.sel
    return np.ix_(ta.active, tb.active)


class _Barrier:
    """Barrier objective ``t c'x - sum log det F_j`` over ``x = z`` or ``x = (z, tau)``."""

    def __init__(self, blocks, c, with_tau: bool):
        self.blocks = blocks
        self.c = np.asarray(c, dtype=float)
        self.with_tau = with_tau
        self.nu = sum(b.dim for b in blocks)

    def _split(self, x):
        if self.with_tau:
            return x[:-1], float(x[-1])
        return x, 0.0

    def factor(self, x):
        """Cholesky factors of every block, or None if any block is not PD."""
        z, tau = self._split(x)
        out = []
        for b in self.blocks:
            try:
                out.append(la.cho_factor(b.assemble(z, tau), lower=True, check_finite=False))
            except la.LinAlgError:
                return None
        return out

    def value(self, x, t, facs=None):
        facs = self.factor(x) if facs is None else facs
        if facs is None:
            return np.inf
        logdet = sum(2.0 * np.sum(np.log(np.diag(L))) for L, _ in facs)
        return t * float(self.c @ x) - logdet

    def derivatives(self, x, t, facs):
        k = x.shape[0]
        grad = t * self.c.copy()
        H = np.zeros((k, k))
        for b, fac in zip(self.blocks, facs):
            # V = L^-1 U, so U_a' F^-1 U_b = V_a' V_b is a Gram product
            V = [la.solve_triangular(fac[0], tm.U, lower=True, check_finite=False) for tm in b.terms]
            for a, ta in enumerate(b.terms):
                Maa = V[a].T @ V[a]
                grad[ta.sel] -= np.sum(ta.v * Maa[ta.c, ta.r], axis=1)
                for bb in range(a, len(b.terms)):
                    tb = b.terms[bb]
                    M = V[a].T @ V[bb]
                    Hab = _pair_hessian(ta, tb, M)
                    H[_block(ta, tb)] += Hab
                    if bb != a:
                        H[_block(tb, ta)] += Hab.T
            if self.with_tau and b.shift:
                Linv = la.solve_triangular(fac[0], np.eye(b.dim), lower=True, check_finite=False)
                G = Linv.T @ Linv
                grad[-1] += np.trace(G)
                H[-1, -1] += np.sum(G * G)
                for a, ta in enumerate(b.terms):
                    GU = Linv.T @ V[a]
                    N = GU.T @ GU
                    cross = -np.sum(ta.v * N[ta.c, ta.r], axis=1)
                    H[ta.sel, -1] += cross
                    H[-1, ta.sel] += cross
        return grad, H


def _newton_direction(grad, H):
    """Solve ``H d = -grad`` after Jacobi scaling, regularizing if Cholesky fails."""
    scale = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / np.outer(scale, scale)
    gs = grad / scale
    reg = 0.0
    for _ in range(12):
        try:
            cf = la.cho_factor(Hs + reg * np.eye(Hs.shape[0]), lower=True, check_finite=False)
            return -la.cho_solve(cf, gs, check_finite=False) / scale
        except la.LinAlgError:
            reg = 1e-14 if reg == 0.0 else reg * 100.0
    return -np.linalg.lstsq(Hs, gs, rcond=None)[0] / scale


def _center(bar: _Barrier, x, t, cfg: SolverConfig):
    """Damped Newton on the barrier objective; returns ``(x, steps, converged)``."""
    facs = bar.factor(x)
    f = bar.value(x, t, facs)
    best, since_best = np.inf, 0
    for it in range(cfg.max_newton):
        grad, H = bar.derivatives(x, t, facs)
        dx = _newton_direction(grad, H)
        dec2 = -float(grad @ dx)
        if dec2 / 2.0 <= cfg.newton_tol:
            return x, it, True
        # Hessian rounding near the boundary can stall the decrement; an
        # approximately centered point is enough to keep following the path
        if dec2 < 0.5 * best:
            best, since_best = dec2, 0
        else:
            since_best += 1
            if since_best >= cfg.stall_steps and dec2 < 1.0:
                return x, it, False
        alpha = 1.0
        while alpha > 1e-12:
            x_new = x + alpha * dx
            facs_new = bar.factor(x_new)
            if facs_new is not None:
                f_new = bar.value(x_new, t, facs_new)
                if f_new <= f - 0.25 * alpha * dec2:
                    break
            alpha *= 0.5
        else:
            # no representable decrease; near the path this is rounding in f
            return x, it, dec2 < 1e-3
        x, facs, f = x_new, facs_new, f_new
    return x, cfg.max_newton, False


def phase1(blocks, z0, cfg: SolverConfig = SolverConfig(), extra_blocks=(), stop_when_feasible: bool = True):
    """Maximize the common margin ``tau`` with ``F_j(z) - tau I >= 0``.

    ``extra_blocks`` are constraints without a margin (for example caps that
    keep the phase-I problem bounded). They must hold strictly at ``z0``.
    Returns ``(z, tau, tau_upper, steps)`` where ``tau_upper`` bounds the
    optimal margin from above. With ``stop_when_feasible`` the search ends at
    the first centered point with a positive margin.
    """
    all_blocks = list(blocks) + [b.without_shift() for b in extra_blocks]
    z0 = np.asarray(z0, dtype=float)
    margins = [np.linalg.eigvalsh(b.assemble(z0))[0] for b in blocks]
    scale = max(1.0, max(abs(m) for m in margins))
    tau0 = min(margins) - 0.1 * scale
    c = np.zeros(z0.shape[0] + 1)
    c[-1] = -1.0
    bar = _Barrier(all_blocks, c, with_tau=True)
    x = np.append(z0, tau0)
    nu = bar.nu
    t = 1.0 / scale
    steps = 0
    tau_upper = np.inf
    for _ in range(cfg.max_outer):
        x, it, _ = _center(bar, x, t, cfg)
        steps += it
        tau = float(x[-1])
        tau_upper = tau + nu / t
        if stop_when_feasible and tau > 0:
            break
        if tau_upper < -cfg.infeasible_slack:
            break
        if nu / t <= cfg.gap_abs + cfg.gap_rel * abs(tau):
            break
        t *= cfg.mu
    return x[:-1], float(x[-1]), float(tau_upper), steps


def solve(c, blocks, z0, cfg: SolverConfig = SolverConfig(), phase1_caps=()) -> SDPResult:
    """Minimize ``c'z`` over the intersection of ``blocks``.

    ``z0`` seeds phase I and must satisfy ``phase1_caps`` strictly.
    """
    c = np.asarray(c, dtype=float)
    z, tau, tau_upper, steps = phase1(blocks, z0, cfg, extra_blocks=phase1_caps)
    if tau <= 0:
        status = INFEASIBLE if tau_upper < -cfg.infeasible_slack else MAX_ITERATIONS
        msg = [f"phase I margin {tau:.3e} (upper bound {tau_upper:.3e})"]
        if status == MAX_ITERATIONS:
            msg.append("margin within solver slack of zero: constraint set is on the boundary")
        return SDPResult(z=z, objective=float(c @ z), status=status, phase1_slack=tau_upper,
                         newton_steps=steps, messages=msg)
    bar = _Barrier(list(blocks), c, with_tau=False)
    nu = bar.nu
    obj = float(c @ z)
    t = max(1e-6, nu / max(abs(obj), 1e-6))
    gap = np.inf
    for _ in range(cfg.max_outer):
        z, it, ok = _center(bar, z, t, cfg)
        steps += it
        obj = float(c @ z)
        gap = nu / t
        if gap <= cfg.gap_abs + cfg.gap_rel * abs(obj):
            return SDPResult(z=z, objective=obj, status=OPTIMAL, phase1_slack=tau,
                             newton_steps=steps, gap=gap)
        if not ok and it == 0:
            log.debug("centering stalled at t=%g", t)
        t *= cfg.mu
    return SDPResult(z=z, objective=obj, status=MAX_ITERATIONS, phase1_slack=tau,
                     newton_steps=steps, gap=gap, messages=["outer iteration limit reached"])
