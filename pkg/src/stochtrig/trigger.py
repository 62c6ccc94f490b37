"""Stochastic send-on-magnitude trigger and its closed-form communication rate.

Sensor ``i`` drops its measurement ``y_i`` with probability
``exp(-y_i' Y_i y_i / 2)``. Because the drop probability is an unnormalized
Gaussian in ``y_i``, conditioning on a drop keeps the state Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import StationaryStats, SystemModel
from .numerics import block_diag, is_psd, symmetrize

DEFAULT_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class TriggerDesign:
    """Per-sensor trigger matrices ``Y_i`` (inverse squared measurement units)."""

    blocks: tuple
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        blocks = tuple(symmetrize(np.atleast_2d(np.asarray(b, dtype=float))) for b in self.blocks)
        for i, b in enumerate(blocks):
            if not is_psd(b):
                raise ValueError(f"trigger block {i} is not positive semidefinite")
            b.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def uniform(cls, ys, dims, eps: float = DEFAULT_EPS) -> "TriggerDesign":
        """Design with ``Y_i = ys[i] * I``."""
        return cls(tuple(float(y) * np.eye(d) for y, d in zip(ys, dims)), eps=eps)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> tuple:
        return tuple(b.shape[0] for b in self.blocks)

    @cached_property
    def Y(self) -> np.ndarray:
        return block_diag(self.blocks)

    @cached_property
    def Y_inv(self) -> np.ndarray:
        """Inverse of ``Y`` with each block's eigenvalues floored at ``eps``.

        Blocks already above ``eps I`` are inverted exactly.
        """
        inv = []
        for b in self.blocks:
            w, V = np.linalg.eigh(b)
            inv.append(symmetrize((V / np.maximum(w, self.eps)) @ V.T))
        return block_diag(inv)

    def check_model(self, model: SystemModel) -> None:
        if self.dims != model.sensor_dims:
            raise ValueError(f"trigger block dims {self.dims} do not match sensors {model.sensor_dims}")


@dataclass(frozen=True)
class DecisionVector:
    gamma: np.ndarray  # length m, 0 = drop, 1 = transmit
    psi: np.ndarray  # length s, the expanded diagonal of the mask

    @classmethod
    def from_gamma(cls, gamma, dims) -> "DecisionVector":
        gamma = np.asarray(gamma, dtype=int)
        if gamma.shape != (len(dims),) or np.any((gamma != 0) & (gamma != 1)):
            raise ValueError(f"gamma must be a 0/1 vector of length {len(dims)}")
        return cls(gamma=gamma, psi=np.repeat(gamma.astype(float), dims))

    @property
    def Psi(self) -> np.ndarray:
        return np.diag(self.psi)


def phi(i: int, y_i, design: TriggerDesign) -> float:
    """Drop probability of sensor ``i`` for measurement ``y_i``."""
    y_i = np.atleast_1d(np.asarray(y_i, dtype=float))
    Yi = design.blocks[i]
    if y_i.shape != (Yi.shape[0],):
        raise ValueError(f"sensor {i} expects a length-{Yi.shape[0]} measurement, got {y_i.shape}")
    return float(np.exp(-0.5 * y_i @ Yi @ y_i))


def drop_probabilities(y, design: TriggerDesign) -> np.ndarray:
    """Vectorized drop probabilities; ``y`` has shape ``(..., s)``, result ``(..., m)``."""
    y = np.asarray(y, dtype=float)
    out = []
    start = 0
    for Yi in design.blocks:
        d = Yi.shape[0]
        yi = y[..., start:start + d]
        out.append(np.exp(-0.5 * np.einsum("...a,ab,...b->...", yi, Yi, yi)))
        start += d
    return np.stack(out, axis=-1)


def decide(y, design: TriggerDesign, zeta) -> np.ndarray:
    """Decisions from pre-drawn uniforms: transmit iff ``zeta > phi(y)``."""
    return (np.asarray(zeta) > drop_probabilities(y, design)).astype(int)


def draw_decisions(y, design: TriggerDesign, rng: np.random.Generator) -> DecisionVector:
    zeta = rng.random(design.m)
    return DecisionVector.from_gamma(decide(y, design, zeta), design.dims)


def comm_rate(i: int, stats: StationaryStats, design: TriggerDesign) -> float:
    """Long-run transmit probability ``1 - det(I + Pi_i Y_i)^(-1/2)``."""
    return _rate(stats.Pi_blocks[i], design.blocks[i])


def comm_rates(stats: StationaryStats, design: TriggerDesign) -> np.ndarray:
    return np.array([comm_rate(i, stats, design) for i in range(design.m)])


def _rate(Pi, Yi) -> float:
    d = Pi.shape[0]
    sign, logdet = np.linalg.slogdet(np.eye(d) + Pi @ Yi)
    if sign <= 0:
        raise ValueError("I + Pi Y must have positive determinant")
    # -expm1 keeps precision for tiny rates
    return float(-np.expm1(-0.5 * logdet))


def rate_to_scalar_y(i: int, stats: StationaryStats, target_rate: float, tol: float = 1e-10) -> float:
    """Scalar ``y`` such that ``Y_i = y I`` transmits at ``target_rate``."""
    if not 0.0 <= target_rate < 1.0:
        raise ValueError(f"target rate {target_rate} is unreachable; need 0 <= rate < 1")
    if target_rate == 0.0:
        return 0.0
    Pi = stats.Pi_blocks[i]
    eye = np.eye(Pi.shape[0])

    def rate(y):
        return _rate(Pi, y * eye)

    lo, hi = 0.0, 1.0 / np.trace(Pi)
    while rate(hi) < target_rate:
        lo, hi = hi, 2.0 * hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target_rate) <= 0.1 * tol or hi - lo <= 1e-15 * hi:
            return mid
        if r < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def uniform_rate_design(stats: StationaryStats, target_rate: float, eps: float = DEFAULT_EPS) -> TriggerDesign:
    """Every sensor transmits at ``target_rate`` with ``Y_i`` a multiple of identity."""
    ys = [rate_to_scalar_y(i, stats, target_rate) for i in range(len(stats.Pi_blocks))]
    return TriggerDesign.uniform(ys, [P.shape[0] for P in stats.Pi_blocks], eps=eps)
