"""Seeded data-center thermal plant: 16 servers, 3 air conditioners, 1 other device.

The state is the vector of device outlet temperatures and each device carries
one inlet-temperature sensor. Continuous-time dynamics::

    dT_out/dt = diag(k) (Psi - I) T_out,    T_in = Psi T_out

are discretized at a 150 s sampling period. ``Psi`` mixes outlet temperatures
into inlets; each row keeps some weight for the external inputs (supply air,
heat sources), so rows sum to less than one and the dynamics are Hurwitz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .model import SystemModel, require_valid
from .numerics import solve_lyapunov, spectral_radius, symmetrize

N_SERVERS, N_AC, N_OTHER = 16, 3, 1
SAMPLE_PERIOD = 150.0  # seconds
PROCESS_ABS_ERR = 0.1  # Kelvin
MEASUREMENT_ABS_ERR = 0.5  # Kelvin
MEAN_ABS_FACTOR = float(np.sqrt(2.0 / np.pi))  # E|N(0, s^2)| = s sqrt(2/pi)


@dataclass(frozen=True, eq=False)
class Scenario:
    model: SystemModel
    label: str
    provenance: dict = field(default_factory=dict)


def random_gram(rng: np.random.Generator, dim: int) -> np.ndarray:
    """``U U'`` with ``U`` uniform on [0, 1]."""
    U = rng.random((dim, dim))
    return symmetrize(U @ U.T)


def scale_to_mean_abs(M: np.ndarray, target: float) -> tuple:
    """Scale ``M`` so the component-averaged mean absolute value of ``N(0, M)`` is ``target``."""
    current = MEAN_ABS_FACTOR * float(np.mean(np.sqrt(np.diag(M))))
    factor = (target / current) ** 2
    return symmetrize(factor * M), factor


def thermal_matrices(rng: np.random.Generator, n: int):
    """Random mixing matrix ``Psi`` and thermal constants ``k`` (1/s)."""
    weights = rng.random((n, n))
    row_sums = rng.uniform(0.85, 0.95, size=n)
    Psi = weights / weights.sum(axis=1, keepdims=True) * row_sums[:, None]
    k = rng.uniform(1.0 / 600.0, 1.0 / 200.0, size=n)
    return Psi, k


def generate_datacenter_scenario(seed: int = 0, max_attempts: int = 100) -> Scenario:
    n = N_SERVERS + N_AC + N_OTHER
    root = np.random.SeedSequence(seed)
    for attempt, child in enumerate(root.spawn(max_attempts)):
        rng = np.random.default_rng(child)
        Psi, k = thermal_matrices(rng, n)
        Ac = np.diag(k) @ (Psi - np.eye(n))
        A = la.expm(SAMPLE_PERIOD * Ac)
        if spectral_radius(A) >= 1.0 - 1e-6:
            continue
        Q, q_factor = scale_to_mean_abs(random_gram(rng, n), PROCESS_ABS_ERR)
        R, r_factor = scale_to_mean_abs(random_gram(rng, n), MEASUREMENT_ABS_ERR)
        Sigma = solve_lyapunov(A, Q)
        model = require_valid(SystemModel(A=A, sensor_blocks=tuple(Psi[i:i + 1] for i in range(n)),
                                          Q=Q, R=R, Sigma0=Sigma))
        provenance = {
            "seed": seed,
            "attempt": attempt,
            "devices": {"servers": N_SERVERS, "air_conditioners": N_AC, "other": N_OTHER},
            "sample_period_s": SAMPLE_PERIOD,
            "process_abs_err_K": PROCESS_ABS_ERR,
            "measurement_abs_err_K": MEASUREMENT_ABS_ERR,
            "q_scale": q_factor,
            "r_scale": r_factor,
            "spectral_radius": spectral_radius(A),
            "initial_covariance": "stationary",
        }
        return Scenario(model=model, label=f"datacenter-{seed}", provenance=provenance)
    raise RuntimeError(f"no stable scenario in {max_attempts} attempts for seed {seed}")
