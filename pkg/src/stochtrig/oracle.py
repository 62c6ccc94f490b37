"""Grid-quadrature ground truth for the trigger filter on one- and two-state plants.

The conditional density of the state is carried on a uniform lattice and
updated by brute force: propagation convolves with the process noise, a
transmission multiplies by the Gaussian likelihood of the received value, and
a drop multiplies by the marginal drop likelihood::

    L0(x) = det(I + R_i Y_i)^(-1/2) exp(-1/2 (C_i x)' Y_i (I + R_i Y_i)^-1 (C_i x))

Sensors are conditioned one at a time, which requires a block-diagonal ``R``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .filtering import EstimatorState, TransmissionRecord, measurement_update, time_update
from .model import SystemModel, stationary_stats
from .numerics import NumericalError
from .trigger import TriggerDesign

DEFAULT_POINTS = 2001
DEFAULT_WIDTH = 8.0  # half-range in stationary standard deviations
OVERFLOW_MASS = 1e-6


class GridOverflowError(NumericalError):
    """Probability mass left the grid."""


@dataclass(frozen=True, eq=False)
class GridPosterior:
    """Density values on the tensor grid spanned by ``axes``."""

    axes: tuple
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def cell(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def mass(self) -> float:
        return float(self.weights.sum() * self.cell)

    def points(self) -> np.ndarray:
        """Grid coordinates with shape ``weights.shape + (dim,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def normalized(self) -> "GridPosterior":
        mass = self.mass
        if not mass > 1e-300:
            raise NumericalError("posterior mass vanished on the grid; conditioning value is implausible")
        return GridPosterior(self.axes, self.weights / mass)


def make_axes(model: SystemModel, points: int = DEFAULT_POINTS, width: float = DEFAULT_WIDTH) -> tuple:
    """Symmetric axes covering ``width`` standard deviations of the wider of ``Sigma`` and ``Sigma0``."""
    if model.n > 2:
        raise ValueError("grid oracle supports at most two states")
    if points < 3 or points % 2 == 0:
        raise ValueError("points must be odd and at least 3 so the origin lies on the grid")
    Sigma = stationary_stats(model).Sigma
    scale = np.sqrt(np.maximum(np.diag(Sigma), np.diag(model.Sigma0)))
    return tuple(np.linspace(-width * s, width * s, points) for s in scale)


def gaussian_density(points, mean, cov) -> np.ndarray:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = points - mean
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, d.reshape(-1, mean.size).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    dens = np.exp(-0.5 * np.sum(z * z, axis=1) - 0.5 * logdet - 0.5 * mean.size * math.log(2 * math.pi))
    return dens.reshape(points.shape[:-1])


def gaussian_posterior(axes, mean, cov) -> GridPosterior:
    post = GridPosterior(tuple(axes), np.zeros(tuple(ax.size for ax in axes)))
    return GridPosterior(post.axes, gaussian_density(post.points(), mean, cov)).normalized()


def initial_posterior(model: SystemModel, points: int = DEFAULT_POINTS, width: float = DEFAULT_WIDTH):
    return gaussian_posterior(make_axes(model, points, width), np.zeros(model.n), model.Sigma0)


def _check_mass(weights, cell):
    lost = 1.0 - float(weights.sum() * cell)
    if lost > OVERFLOW_MASS:
        raise GridOverflowError(f"{lost:.2e} of the probability mass left the grid; widen the range")


def _propagate_1d(post: GridPosterior, a: float, q: float) -> np.ndarray:
    x = post.axes[0]
    h = post.spacing[0]
    K = np.exp(-0.5 * (x[:, None] - a * x[None, :]) ** 2 / q) / math.sqrt(2 * math.pi * q)
    out = K @ post.weights * h
    _check_mass(out, h)
    return out


def _propagate_2d(post: GridPosterior, A, Q) -> np.ndarray:
    h = post.spacing
    if np.allclose(A, 0.0):
        return gaussian_density(post.points(), np.zeros(2), Q)
    det = float(np.linalg.det(A))
    if abs(det) < 1e-12 * max(1.0, np.abs(A).max() ** 2):
        raise ValueError("two-state oracle needs an invertible A (or A = 0)")
    # density of z = A x is p(A^-1 z) / |det A|, sampled by cubic interpolation
    src = post.points() @ np.linalg.inv(A).T
    coords = [(src[..., d] - post.axes[d][0]) / h[d] for d in range(2)]
    pz = ndimage.map_coordinates(post.weights, coords, order=3, mode="constant", cval=0.0) / abs(det)
    pz = np.maximum(pz, 0.0)
    # noise kernel on the same spacing, wide enough for 8 standard deviations
    half = [min(int(math.ceil(8.0 * math.sqrt(Q[d, d]) / h[d])), post.axes[d].size - 1) for d in range(2)]
    kx, ky = (np.arange(-half[d], half[d] + 1) * h[d] for d in range(2))
    kpts = np.stack(np.meshgrid(kx, ky, indexing="ij"), axis=-1)
    kernel = gaussian_density(kpts, np.zeros(2), Q) * post.cell
    out = signal.fftconvolve(pz, kernel, mode="same")
    out = np.maximum(out, 0.0)
    _check_mass(out, post.cell)
    return out


def propagate(post: GridPosterior, model: SystemModel) -> GridPosterior:
    """Density of ``A x + w`` given the density of ``x``."""
    if post.dim == 1:
        w = _propagate_1d(post, float(model.A[0, 0]), float(model.Q[0, 0]))
    else:
        w = _propagate_2d(post, model.A, model.Q)
    return GridPosterior(post.axes, w).normalized()


def _require_block_diagonal_R(model: SystemModel):
    R = model.R.copy()
    for i in range(model.m):
        sl = model.sensor_slice(i)
        R[sl, sl] = 0.0
    if np.any(R != 0.0):
        raise ValueError("grid oracle needs block-diagonal R (no cross-sensor noise correlation)")


def _sensor_projection(post: GridPosterior, model: SystemModel, i: int) -> np.ndarray:
    return post.points() @ model.sensor_blocks[i].T


def condition_on_transmit(post: GridPosterior, model: SystemModel, i: int, value) -> GridPosterior:
    """Multiply by the likelihood of receiving ``value`` from sensor ``i``."""
    _require_block_diagonal_R(model)
    value = np.atleast_1d(np.asarray(value, dtype=float))
    Ri = model.R_block(i)
    Cx = _sensor_projection(post, model, i)
    lik = gaussian_density(value - Cx, np.zeros(value.size), Ri)
    return GridPosterior(post.axes, post.weights * lik).normalized()


def drop_likelihood(Cx, Ri, Yi) -> np.ndarray:
    """Probability that a sensor with trigger block ``Yi`` stays silent, given ``C_i x``."""
    d = Ri.shape[0]
    IRY = np.eye(d) + Ri @ Yi
    M = Yi @ np.linalg.inv(IRY)  # equals (Y^-1 + R)^-1 without inverting Y
    M = 0.5 * (M + M.T)
    quad = np.einsum("...a,ab,...b->...", Cx, M, Cx)
    return np.exp(-0.5 * quad) / math.sqrt(np.linalg.det(IRY))


def condition_on_drop(post: GridPosterior, model: SystemModel, design: TriggerDesign, i: int) -> GridPosterior:
    """Multiply by the drop likelihood of sensor ``i``."""
    _require_block_diagonal_R(model)
    lik = drop_likelihood(_sensor_projection(post, model, i), model.R_block(i), design.blocks[i])
    return GridPosterior(post.axes, post.weights * lik).normalized()


def moments(post: GridPosterior):
    """Grid-weighted mean and covariance."""
    p = post.weights * post.cell
    pts = post.points().reshape(-1, post.dim)
    w = p.ravel()
    mean = w @ pts
    d = pts - mean
    cov = (d * w[:, None]).T @ d
    return mean, 0.5 * (cov + cov.T)


def excess_kurtosis(post: GridPosterior) -> np.ndarray:
    """Excess kurtosis of each one-dimensional marginal."""
    out = []
    for axis in range(post.dim):
        others = tuple(a for a in range(post.dim) if a != axis)
        marg = post.weights.sum(axis=others) if others else post.weights
        x = post.axes[axis]
        w = marg / marg.sum()
        mu = w @ x
        var = w @ (x - mu) ** 2
        out.append(float(w @ (x - mu) ** 4 / var ** 2 - 3.0))
    return np.array(out)


# -- equivalence against the trigger filter -------------------------------------

@dataclass(frozen=True)
class OracleNode:
    pattern: tuple  # decisions per step, each a tuple of 0/1 per sensor
    mean_error: float
    cov_error: float
    kurtosis: float


@dataclass(frozen=True)
class OracleReport:
    nodes: tuple

    @property
    def max_mean_error(self) -> float:
        return max(n.mean_error for n in self.nodes)

    @property
    def max_cov_error(self) -> float:
        return max(n.cov_error for n in self.nodes)

    @property
    def max_kurtosis(self) -> float:
        return max(abs(n.kurtosis) for n in self.nodes)

    @property
    def patterns(self) -> int:
        return sum(1 for n in self.nodes if len(n.pattern) == max(len(m.pattern) for m in self.nodes))


def default_values(model: SystemModel, steps: int) -> np.ndarray:
    """Received values per (step, sensor): moderate multiples of the measurement scale."""
    Pi = stationary_stats(model).Pi_blocks
    signs = np.array([1.0, -0.6, 0.8, -1.1, 0.5])
    vals = np.empty((steps, model.s))
    for k in range(steps):
        for i in range(model.m):
            sl = model.sensor_slice(i)
            scale = np.sqrt(np.diag(Pi[i]))
            vals[k, sl] = signs[(k + 2 * i) % signs.size] * scale * 0.7
    return vals


def relative_errors(mean, cov, x_hat, P):
    """Mean error relative to ``max(|x_hat|, sqrt(max eig P))``; covariance error in Frobenius norm."""
    scale = max(float(np.linalg.norm(x_hat)), math.sqrt(float(np.linalg.eigvalsh(P)[-1])))
    mean_err = float(np.linalg.norm(mean - x_hat)) / scale
    cov_err = float(np.linalg.norm(cov - P)) / float(np.linalg.norm(P))
    return mean_err, cov_err


def equivalence_check(model: SystemModel, design: TriggerDesign, steps: int = 3, values=None,
                      points: int = DEFAULT_POINTS, width: float = DEFAULT_WIDTH) -> OracleReport:
    """Compare filter and grid posteriors over every decision pattern of length ``steps``.

    The decision tree is walked depth first so each conditioned density is
    propagated once and shared by all of its continuations.
    """
    _require_block_diagonal_R(model)
    values = default_values(model, steps) if values is None else np.asarray(values, dtype=float)
    gammas = list(itertools.product((0, 1), repeat=model.m))
    nodes = []

    def visit(prior: GridPosterior, state: EstimatorState, k: int, pattern: tuple):
        for gamma in gammas:
            post = prior
            for i, g in enumerate(gamma):
                if g:
                    post = condition_on_transmit(post, model, i, values[k, model.sensor_slice(i)])
                else:
                    post = condition_on_drop(post, model, design, i)
            record = TransmissionRecord.from_measurement(values[k], gamma, model.sensor_dims)
            filt = measurement_update(state, model, design, record)
            mean, cov = moments(post)
            mean_err, cov_err = relative_errors(mean, cov, filt.x_post, filt.P_post)
            path = pattern + (gamma,)
            nodes.append(OracleNode(path, mean_err, cov_err, float(np.max(np.abs(excess_kurtosis(post))))))
            if k + 1 < steps:
                visit(propagate(post, model), time_update(filt, model), k + 1, path)

    visit(initial_posterior(model, points, width), EstimatorState.initial(model), 0, ())
    return OracleReport(tuple(nodes))
