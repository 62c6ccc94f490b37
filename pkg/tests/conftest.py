import numpy as np
import pytest

from stochtrig.model import SystemModel, stationary_stats


def scalar_model(a=0.5, c=1.0, q=1.0, r=1.0, sigma0=None):
    if sigma0 is None:
        sigma0 = q / (1.0 - a * a)
    return SystemModel(A=[[a]], sensor_blocks=([[c]],), Q=[[q]], R=[[r]], Sigma0=[[sigma0]])


def random_spd(rng, n, floor=0.1):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + floor * np.eye(n)


def random_stable(rng, n, radius=0.9):
    A = rng.standard_normal((n, n))
    return A * (radius / max(abs(np.linalg.eigvals(A))))


def random_model(rng, n, sensor_dims, radius=0.9, block_diag_R=False):
    """Stable random plant with stationary initial covariance."""
    s = sum(sensor_dims)
    A = random_stable(rng, n, radius * rng.uniform(0.3, 1.0))
    C = rng.standard_normal((s, n))
    Q = random_spd(rng, n)
    if block_diag_R:
        from scipy.linalg import block_diag
        R = block_diag(*[random_spd(rng, d) for d in sensor_dims])
    else:
        R = random_spd(rng, s)
    offs = np.cumsum((0,) + tuple(sensor_dims))
    blocks = tuple(C[offs[i]:offs[i + 1]] for i in range(len(sensor_dims)))
    tmp = SystemModel(A, blocks, Q, R, np.eye(n))
    return SystemModel(A, blocks, Q, R, stationary_stats(tmp).Sigma)


def two_state_model():
    return SystemModel(
        A=[[0.8, 0.2], [-0.1, 0.7]],
        sensor_blocks=([[1.0, 0.0]], [[0.5, 1.0]]),
        Q=[[0.5, 0.1], [0.1, 0.4]],
        R=[[0.3, 0.0], [0.0, 0.6]],
        Sigma0=np.eye(2),
    )


@pytest.fixture
def scalar():
    return scalar_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_pbar(a, c, q, r, y):
    """Worst-case posterior variance of the scalar plant for trigger weight ``y``.

    Closed form: the upper fixed point solves a quadratic in X.
    """
    w = r + (np.inf if y == 0 else 1.0 / y)
    if np.isinf(w):
        X = q / (1.0 - a * a)
        return X
    # X = a^2 X + q - a^2 c^2 X^2 / (c^2 X + w)  <=>  c^2 X^2 + (w (1 - a^2) - q c^2) X - q w = 0
    b = w * (1.0 - a * a) - q * c * c
    X = (-b + np.sqrt(b * b + 4.0 * c * c * q * w)) / (2.0 * c * c)
    return X - X * X * c * c / (c * c * X + w)


def bisection_min_y(a, c, q, r, delta, iters=200):
    """Smallest ``y`` with ``P_bar(y) <= delta`` by bisection; ``None`` if none exists."""
    if scalar_pbar(a, c, q, r, 0.0) <= delta:
        return 0.0
    hi = 1.0
    while scalar_pbar(a, c, q, r, hi) > delta:
        hi *= 2.0
        if hi > 1e15:
            return None
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if scalar_pbar(a, c, q, r, mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def random_scalar_instance(rng):
    """``(a, c, q, r)`` with moderate conditioning."""
    return (float(rng.uniform(-0.95, 0.95)), float(rng.uniform(0.3, 2.0)),
            float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0)))


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
