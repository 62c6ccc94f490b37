"""MMSE filtering under stochastic triggers, plus the two baseline filters.

The trigger filter is a Kalman filter whose measurement noise is inflated to
``R + (I - Psi) Y^-1`` on the rows of sensors that stayed silent, and whose
innovation is ``Psi y - C x``. A silent sensor therefore still pulls the
estimate toward zero, since a drop is more likely when ``|y|`` is small.

Single-trajectory functions work on :class:`EstimatorState`. The ``batch_*``
functions run the same recursions on stacks of independent trials.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as la

from .model import SystemModel, sample_noise
from .numerics import NumericalError, symmetrize
from .trigger import DecisionVector, TriggerDesign, decide

SCHEDULES = ("stochastic", "random", "always")


@dataclass(frozen=True)
class EstimatorState:
    x_prior: np.ndarray
    P_prior: np.ndarray
    x_post: np.ndarray | None = None
    P_post: np.ndarray | None = None
    k: int = 0

    @classmethod
    def initial(cls, model: SystemModel) -> "EstimatorState":
        return cls(x_prior=np.zeros(model.n), P_prior=np.array(model.Sigma0, dtype=float))


@dataclass(frozen=True)
class TransmissionRecord:
    """Decisions at one step and the received values in sensor order."""

    decision: DecisionVector
    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if values.shape != (int(self.decision.psi.sum()),):
            raise ValueError(f"expected {int(self.decision.psi.sum())} received values, got {values.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_measurement(cls, y, gamma, dims) -> "TransmissionRecord":
        """Keep the blocks of ``y`` whose sensors transmit."""
        dec = DecisionVector.from_gamma(gamma, dims)
        return cls(dec, np.asarray(y, dtype=float)[dec.psi.astype(bool)])

    def full(self) -> np.ndarray:
        """Length-``s`` measurement with zeros in the dropped slots."""
        y = np.zeros(self.decision.psi.shape[0])
        y[self.decision.psi.astype(bool)] = self.values
        return y


def _cho(W):
    try:
        return la.cho_factor(symmetrize(W), lower=True)
    except la.LinAlgError as exc:
        raise NumericalError("innovation covariance W is not positive definite; "
                             "check that dropped trigger blocks are strictly positive") from exc


def time_update(state: EstimatorState, model: SystemModel) -> EstimatorState:
    x_prior = model.A @ state.x_post
    P_prior = symmetrize(model.A @ state.P_post @ model.A.T + model.Q)
    return EstimatorState(x_prior=x_prior, P_prior=P_prior, k=state.k + 1)


def _kalman_step(state: EstimatorState, C, W, innovation) -> EstimatorState:
    P = state.P_prior
    CP = C @ P
    cf = _cho(W)
    x_post = state.x_prior + CP.T @ la.cho_solve(cf, innovation)
    P_post = symmetrize(P - CP.T @ la.cho_solve(cf, CP))
    return replace(state, x_post=x_post, P_post=P_post)


def measurement_update(state: EstimatorState, model: SystemModel, design: TriggerDesign,
                       record: TransmissionRecord) -> EstimatorState:
    """Exact conditional mean and covariance given the transmitted values and the drops."""
    psi = record.decision.psi
    C = model.C
    W = C @ state.P_prior @ C.T + model.R + (1.0 - psi)[:, None] * design.Y_inv
    innovation = psi * record.full() - C @ state.x_prior
    return _kalman_step(state, C, W, innovation)


def standard_kalman_update(state: EstimatorState, model: SystemModel, y) -> EstimatorState:
    C = model.C
    W = C @ state.P_prior @ C.T + model.R
    return _kalman_step(state, C, W, np.asarray(y, dtype=float) - C @ state.x_prior)


def intermittent_update(state: EstimatorState, model: SystemModel, record: TransmissionRecord) -> EstimatorState:
    """Kalman update on the received rows only; silence carries no information."""
    rows = record.decision.psi.astype(bool)
    if not rows.any():
        return replace(state, x_post=state.x_prior.copy(), P_post=state.P_prior.copy())
    C = model.C[rows]
    W = C @ state.P_prior @ C.T + model.R[np.ix_(rows, rows)]
    return _kalman_step(state, C, W, record.values - C @ state.x_prior)


@dataclass(frozen=True)
class Trajectory:
    x_true: np.ndarray  # (T, n)
    y: np.ndarray  # (T, s)
    gamma: np.ndarray  # (T, m)
    x_prior: np.ndarray  # (T, n)
    P_prior: np.ndarray  # (T, n, n)
    x_post: np.ndarray
    P_post: np.ndarray

    def trace_rows(self):
        """Per-step rows ``(k, gamma..., trace P_prior, trace P_post, squared error)``."""
        err = np.sum((self.x_true - self.x_post) ** 2, axis=1)
        tr_prior = np.trace(self.P_prior, axis1=1, axis2=2)
        tr_post = np.trace(self.P_post, axis1=1, axis2=2)
        for k in range(self.x_true.shape[0]):
            yield (k, *self.gamma[k].tolist(), float(tr_prior[k]), float(tr_post[k]), float(err[k]))


def draw_trial(model: SystemModel, horizon: int, rng: np.random.Generator):
    """Plant trajectory and trigger uniforms for one trial, in a fixed draw order."""
    x0, w, v = sample_noise(model, horizon, rng)
    zeta = rng.random((horizon, model.m))
    x = np.empty((horizon, model.n))
    x[0] = x0
    for k in range(horizon - 1):
        x[k + 1] = model.A @ x[k] + w[k]
    y = x @ model.C.T + v
    return x, y, zeta


def schedule_decisions(schedule: str, y, zeta, design: TriggerDesign | None, rate: float | None):
    """Transmit decisions for each schedule kind, from shared uniforms ``zeta``."""
    if schedule == "stochastic":
        return decide(y, design, zeta)
    if schedule == "random":
        if rate is None:
            raise ValueError("random schedule needs a rate")
        # transmit with probability `rate`, independent of y
        return (np.asarray(zeta) < rate).astype(int)
    if schedule == "always":
        return np.ones(np.shape(zeta), dtype=int)
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def run_trajectory(model: SystemModel, design: TriggerDesign | None, horizon: int,
                   rng: np.random.Generator, schedule: str = "stochastic",
                   rate: float | None = None, gamma_override=None) -> Trajectory:
    """Simulate the plant, draw decisions and run the matching filter.

    ``always`` uses the standard Kalman filter, ``random`` the intermittent
    filter and ``stochastic`` the trigger filter. ``gamma_override`` replaces
    the drawn decisions (same shape ``(horizon, m)``) and is fed to the
    filter of ``schedule``.
    """
    x, y, zeta = draw_trial(model, horizon, rng)
    if gamma_override is not None:
        gamma = np.asarray(gamma_override, dtype=int).reshape(horizon, model.m)
    else:
        gamma = schedule_decisions(schedule, y, zeta, design, rate)
    if schedule == "stochastic" and design is None:
        raise ValueError("stochastic schedule needs a trigger design")
    n = model.n
    out = {name: np.empty((horizon, n)) for name in ("x_prior", "x_post")}
    out.update({name: np.empty((horizon, n, n)) for name in ("P_prior", "P_post")})
    state = EstimatorState.initial(model)
    for k in range(horizon):
        if k > 0:
            state = time_update(state, model)
        record = TransmissionRecord.from_measurement(y[k], gamma[k], model.sensor_dims)
        if schedule == "stochastic":
            state = measurement_update(state, model, design, record)
        elif schedule == "random":
            state = intermittent_update(state, model, record)
        else:
            state = standard_kalman_update(state, model, y[k]) if gamma[k].all() \
                else intermittent_update(state, model, record)
        out["x_prior"][k] = state.x_prior
        out["P_prior"][k] = state.P_prior
        out["x_post"][k] = state.x_post
        out["P_post"][k] = state.P_post
    return Trajectory(x_true=x, y=y, gamma=gamma, **out)


# -- batched recursions over independent trials -------------------------------

def batch_time_update(x, P, A, Q):
    x_prior = x @ A.T
    P_prior = A @ P @ A.T + Q
    return x_prior, 0.5 * (P_prior + np.swapaxes(P_prior, -1, -2))


def _batch_gain_step(x, P, C, W, psi_rows, innovation):
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("batched innovation covariance not positive definite") from exc
    CP = C @ P  # (B, s, n)
    rhs = CP if psi_rows is None else psi_rows[:, :, None] * CP
    G = np.linalg.solve(W, rhs)
    if psi_rows is not None:
        G = psi_rows[:, :, None] * G
    x_post = x + np.einsum("bsn,bs->bn", G, innovation)
    P_post = P - np.swapaxes(CP, -1, -2) @ G
    return x_post, 0.5 * (P_post + np.swapaxes(P_post, -1, -2))


def batch_trigger_update(x, P, y, psi, C, R, Y_inv):
    """Trigger-filter measurement update; ``psi`` is the ``(B, s)`` transmit mask."""
    W = C @ P @ C.T + R + (1.0 - psi)[:, :, None] * Y_inv
    innovation = psi * y - x @ C.T
    return _batch_gain_step(x, P, C, W, None, innovation)


def batch_intermittent_update(x, P, y, psi, C, R):
    """Received-rows Kalman update, exact for any transmit mask.

    Dropped rows and columns of ``W`` are replaced by identity, which makes the
    masked inverse equal ``Gamma' (Gamma W Gamma')^-1 Gamma``.
    """
    W = C @ P @ C.T + R
    W = psi[:, :, None] * W * psi[:, None, :]
    idx = np.arange(W.shape[-1])
    W[:, idx, idx] += 1.0 - psi
    innovation = psi * (y - x @ C.T)
    return _batch_gain_step(x, P, C, W, psi, innovation)
