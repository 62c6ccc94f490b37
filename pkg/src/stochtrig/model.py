"""The linear Gaussian plant observed by ``m`` vector sensors."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import is_pd, solve_lyapunov, spectral_radius, symmetrize


class ModelError(ValueError):
    """Raised when a :class:`SystemModel` violates one of its invariants."""

    def __init__(self, reasons):
        self.reasons = list(reasons)
        super().__init__("; ".join(self.reasons))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    reasons: tuple = ()
    spectral_radius: float = float("nan")
    detectable: bool = False

    def summary(self) -> str:
        if self.ok:
            return (f"model valid: spectral radius {self.spectral_radius:.6g} < 1, "
                    "(A, C) detectable (implied by stability)")
        return "model invalid: " + "; ".join(self.reasons)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Plant ``x[k+1] = A x[k] + w[k]``, ``y_i[k] = C_i x[k] + v_i[k]``.

    ``R`` is the covariance of the stacked measurement noise and may couple
    sensors. ``Sigma0`` is the covariance of the zero-mean initial state.
    """

    A: np.ndarray
    sensor_blocks: tuple
    Q: np.ndarray
    R: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        blocks = tuple(np.atleast_2d(np.asarray(c, dtype=float)) for c in self.sensor_blocks)
        set_(self, "sensor_blocks", blocks)
        for name in ("Q", "R", "Sigma0"):
            set_(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for arr in (self.A, self.Q, self.R, self.Sigma0, *blocks):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return len(self.sensor_blocks)

    @property
    def sensor_dims(self) -> tuple:
        return tuple(c.shape[0] for c in self.sensor_blocks)

    @property
    def s(self) -> int:
        return sum(self.sensor_dims)

    @cached_property
    def C(self) -> np.ndarray:
        C = np.vstack(self.sensor_blocks)
        C.setflags(write=False)
        return C

    @cached_property
    def offsets(self) -> tuple:
        """Start index of each sensor inside the stacked measurement."""
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sensor_dims)]))

    def sensor_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def R_block(self, i: int) -> np.ndarray:
        sl = self.sensor_slice(i)
        return self.R[sl, sl]

    def expand_mask(self, gamma) -> np.ndarray:
        """Length-``s`` 0/1 vector repeating each sensor's decision over its rows."""
        return np.repeat(np.asarray(gamma, dtype=float), self.sensor_dims, axis=-1)

    @cached_property
    def cholesky_factors(self):
        """Lower Cholesky factors of ``(Sigma0, Q, R)``, computed once."""
        return tuple(np.linalg.cholesky(symmetrize(M)) for M in (self.Sigma0, self.Q, self.R))


def validate(model: SystemModel) -> ValidationReport:
    reasons = []
    n = model.A.shape[0]
    rho = float("nan")
    if model.A.shape != (n, n):
        reasons.append("A not square")
    else:
        rho = spectral_radius(model.A)
        if not rho < 1.0:
            reasons.append(f"spectral radius >= 1 (got {rho:.6g})")
    if model.m == 0:
        reasons.append("no sensors")
    for i, Ci in enumerate(model.sensor_blocks):
        if Ci.ndim != 2 or Ci.shape[1] != n:
            reasons.append(f"sensor {i} block has shape {Ci.shape}, expected (s_{i}, {n})")
    s = sum(Ci.shape[0] for Ci in model.sensor_blocks)
    for name, M, dim in (("Q", model.Q, n), ("R", model.R, s), ("Sigma0", model.Sigma0, n)):
        if M.shape != (dim, dim):
            reasons.append(f"{name} has shape {M.shape}, expected ({dim}, {dim})")
        elif not np.allclose(M, M.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(M).max())):
            reasons.append(f"{name} not symmetric")
        elif not is_pd(M) or np.linalg.eigvalsh(M)[0] <= 0:
            reasons.append(f"{name} not positive definite")
    ok = not reasons
    return ValidationReport(ok=ok, reasons=tuple(reasons), spectral_radius=rho, detectable=ok)


def require_valid(model: SystemModel) -> SystemModel:
    report = validate(model)
    if not report.ok:
        raise ModelError(report.reasons)
    return model


@dataclass(frozen=True)
class StationaryStats:
    Sigma: np.ndarray
    Pi_blocks: tuple


def stationary_stats(model: SystemModel) -> StationaryStats:
    """Stationary state covariance and per-sensor measurement covariances."""
    Sigma = solve_lyapunov(model.A, model.Q)
    Pi = tuple(symmetrize(Ci @ Sigma @ Ci.T + model.R_block(i))
               for i, Ci in enumerate(model.sensor_blocks))
    return StationaryStats(Sigma=Sigma, Pi_blocks=Pi)


@dataclass(frozen=True)
class PlantTrajectory:
    x: np.ndarray  # (horizon, n)
    y: np.ndarray  # (horizon, s)


def sample_noise(model: SystemModel, horizon: int, rng: np.random.Generator):
    """Draw ``(x0, w, v)``; consumes the stream in that fixed order."""
    L0, LQ, LR = model.cholesky_factors
    x0 = L0 @ rng.standard_normal(model.n)
    w = rng.standard_normal((horizon, model.n)) @ LQ.T
    v = rng.standard_normal((horizon, model.s)) @ LR.T
    return x0, w, v


def simulate_plant(model: SystemModel, horizon: int, rng: np.random.Generator) -> PlantTrajectory:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0, w, v = sample_noise(model, horizon, rng)
    x = np.empty((horizon, model.n))
    x[0] = x0
    for k in range(horizon - 1):
        x[k + 1] = model.A @ x[k] + w[k]
    y = x @ model.C.T + v
    return PlantTrajectory(x=x, y=y)
