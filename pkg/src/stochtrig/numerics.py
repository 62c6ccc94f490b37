"""Dense symmetric-matrix helpers plus the Lyapunov and Riccati fixed-point solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or hit a singular system."""


@dataclass(frozen=True)
class Tolerances:
    psd_slack: float = 1e-9
    fixed_point_tol: float = 1e-10
    max_iters: int = 10000

    def __post_init__(self):
        if self.psd_slack < 0:
            raise ValueError("psd_slack must be nonnegative")
        if self.fixed_point_tol <= 0:
            raise ValueError("fixed_point_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


DEFAULT_TOL = Tolerances()


def as_square(M) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def symmetrize(M) -> np.ndarray:
    """Return ``(M + M.T) / 2``."""
    M = as_square(M)
    return 0.5 * (M + M.T)


def min_eigenvalue(M) -> float:
    return float(la.eigvalsh(symmetrize(M))[0])


def is_psd(M, tol: Tolerances = DEFAULT_TOL) -> bool:
    M = symmetrize(M)
    return min_eigenvalue(M) >= -tol.psd_slack * (1.0 + np.linalg.norm(M, 2))


def is_pd(M) -> bool:
    """Cholesky-based strict positive definiteness test."""
    try:
        np.linalg.cholesky(symmetrize(M))
    except np.linalg.LinAlgError:
        return False
    return True


def loewner_leq(X1, X2, tol: Tolerances = DEFAULT_TOL) -> bool:
    """True when ``X1 <= X2`` in the Loewner order (up to the PSD slack)."""
    return is_psd(np.asarray(X2) - np.asarray(X1), tol)


def spectral_radius(A) -> float:
    A = as_square(A)
    return float(np.max(np.abs(la.eigvals(A))))


def block_diag(blocks) -> np.ndarray:
    return la.block_diag(*[np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks])


def solve_lyapunov(A, Q) -> np.ndarray:
    """Unique solution of ``S = A S A' + Q`` for a Schur-stable ``A``.

    Solved through the Kronecker-vectorized linear system, which is exact up to
    round-off for the desk-scale dimensions used here.
    """
    A = as_square(A)
    Q = symmetrize(Q)
    n = A.shape[0]
    if Q.shape != (n, n):
        raise ValueError("A and Q dimensions differ")
    if spectral_radius(A) >= 1.0:
        raise ValueError("solve_lyapunov requires spectral radius < 1")
    lhs = np.eye(n * n) - np.kron(A, A)
    vec = np.linalg.solve(lhs, Q.reshape(-1))
    return symmetrize(vec.reshape(n, n))


def riccati_map(X, A, C, Q, W) -> np.ndarray:
    """One step of ``g_W(X) = AXA' + Q - AXC'(CXC' + W)^-1 CXA'``."""
    AX = A @ X
    innov = symmetrize(C @ X @ C.T + W)
    cf = la.cho_factor(innov)
    gain_term = AX @ C.T @ la.cho_solve(cf, C @ AX.T)
    return symmetrize(AX @ A.T + Q - gain_term)


def riccati_fixed_point(A, C, Q, W, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Fixed point of the Riccati map ``g_W`` by monotone iteration from zero.

    Raises
    ------
    NumericalError
        If the iteration has not settled after ``tol.max_iters`` steps.
    """
    A = as_square(A)
    Q = symmetrize(Q)
    W = symmetrize(W)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    X = np.zeros_like(A)
    for _ in range(tol.max_iters):
        X_next = riccati_map(X, A, C, Q, W)
        if np.linalg.norm(X_next - X) <= tol.fixed_point_tol * max(np.linalg.norm(X_next), 1e-300):
            return X_next
        X = X_next
    raise NumericalError(f"Riccati iteration did not converge in {tol.max_iters} steps")
