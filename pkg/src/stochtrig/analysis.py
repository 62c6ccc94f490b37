"""Asymptotic covariance envelopes and rate bounds for a trigger design."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SystemModel
from .numerics import DEFAULT_TOL, Tolerances, min_eigenvalue, riccati_fixed_point, symmetrize
from .trigger import TriggerDesign

DEFAULT_BURN_IN = 100


@dataclass(frozen=True)
class BoundSet:
    X_lower: np.ndarray  # fixed point of g_R: every sensor always transmits
    X_upper: np.ndarray  # fixed point of g_{R + Y^-1}: every sensor always silent
    P_bar: np.ndarray  # worst-case a-posteriori covariance


def posterior_from_prior(X, C, W) -> np.ndarray:
    """``X - XC'(CXC' + W)^-1 CX``."""
    CX = C @ X
    return symmetrize(X - CX.T @ np.linalg.solve(symmetrize(CX @ C.T + W), CX))


def compute_bounds(model: SystemModel, design: TriggerDesign, tol: Tolerances = DEFAULT_TOL) -> BoundSet:
    W_silent = model.R + design.Y_inv
    X_lower = riccati_fixed_point(model.A, model.C, model.Q, model.R, tol)
    X_upper = riccati_fixed_point(model.A, model.C, model.Q, W_silent, tol)
    return BoundSet(X_lower, X_upper, posterior_from_prior(X_upper, model.C, W_silent))


def p_bar(model: SystemModel, design: TriggerDesign, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    return compute_bounds(model, design, tol).P_bar


@dataclass(frozen=True)
class BoundCheckReport:
    violations: int
    closest_to_upper: float
    closest_to_lower: float
    max_trace: float
    steps_checked: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def empirical_bound_check(P_seq, lower, upper, epsilon: float = 1e-6,
                          burn_in: int = DEFAULT_BURN_IN) -> BoundCheckReport:
    """Compare a covariance trajectory against the envelope ``[lower, upper]``.

    Counts steps after ``burn_in`` where ``lower - eps I <= P <= upper + eps I``
    fails, and records how close the trajectory came to each envelope in
    spectral norm.
    """
    P_seq = np.asarray(P_seq, dtype=float)
    if P_seq.shape[0] <= burn_in:
        raise ValueError("trajectory must be longer than burn_in")
    tail = P_seq[burn_in:]
    n = tail.shape[-1]
    eye = epsilon * np.eye(n)
    lo_gap = np.linalg.eigvalsh(tail - lower + eye)[:, 0]
    hi_gap = np.linalg.eigvalsh(upper + eye - tail)[:, 0]
    violations = int(np.sum((lo_gap < 0) | (hi_gap < 0)))
    dist_up = np.linalg.norm(tail - upper, ord=2, axis=(1, 2))
    dist_lo = np.linalg.norm(tail - lower, ord=2, axis=(1, 2))
    return BoundCheckReport(
        violations=violations,
        closest_to_upper=float(dist_up.min()),
        closest_to_lower=float(dist_lo.min()),
        max_trace=float(np.trace(P_seq, axis1=1, axis2=2).max()),
        steps_checked=int(tail.shape[0]),
    )


def f_lower(x):
    """``1 - (1 + x)^(-1/2)``."""
    return 1.0 - (1.0 + np.asarray(x, dtype=float)) ** -0.5


def g_upper(x):
    """``1 - exp(x)^(-1/2)``."""
    return -np.expm1(-0.5 * np.asarray(x, dtype=float))


def trace_weight(Pi_blocks, design_blocks) -> float:
    """``u = sum_i tr(Pi_i Y_i)``, the relaxed communication cost."""
    if len(Pi_blocks) != len(design_blocks):
        raise ValueError("Pi and design block lists differ in length")
    return float(sum(np.trace(np.asarray(P) @ np.asarray(Y)) for P, Y in zip(Pi_blocks, design_blocks)))


def lemma2_bounds(Pi_blocks, design_blocks):
    """Lower and upper bounds ``(f(u), m g(u/m))`` on the total rate."""
    u = trace_weight(Pi_blocks, design_blocks)
    m = len(Pi_blocks)
    return float(f_lower(u)), float(m * g_upper(u / m))


def loewner_gap(X_small, X_big) -> float:
    """Smallest eigenvalue of ``X_big - X_small``; nonnegative when ordered."""
    return min_eigenvalue(np.asarray(X_big) - np.asarray(X_small))
