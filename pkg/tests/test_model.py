import numpy as np
import pytest

from stochtrig.model import ModelError, SystemModel, require_valid, simulate_plant, stationary_stats, validate

from conftest import scalar_model


def test_validate_examples():
    ok = SystemModel(0.5 * np.eye(2), (np.eye(2),), np.eye(2), np.eye(2), np.eye(2))
    report = validate(ok)
    assert report.ok and report.detectable
    bad = validate(scalar_model(a=1.1, sigma0=1.0))
    assert not bad.ok and any("spectral radius >= 1" in r for r in bad.reasons)
    singular_R = SystemModel(0.5 * np.eye(2), (np.eye(2),), np.eye(2), np.diag([1.0, 0.0]), np.eye(2))
    assert any("R not positive definite" in r for r in validate(singular_R).reasons)


def test_validate_names_each_violation():
    m = SystemModel([[1.2]], ([[1.0]],), [[-1.0]], [[0.0]], [[1.0]])
    reasons = validate(m).reasons
    assert len(reasons) == 3
    with pytest.raises(ModelError):
        require_valid(m)


def test_dimension_mismatch_reported():
    m = SystemModel(0.5 * np.eye(2), (np.ones((1, 3)),), np.eye(2), np.eye(1), np.eye(2))
    assert any("sensor 0" in r for r in validate(m).reasons)


def test_stationary_stats_scalar():
    st = stationary_stats(scalar_model())
    assert st.Sigma[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert st.Pi_blocks[0][0, 0] == pytest.approx(7.0 / 3.0, rel=1e-12)


def test_stationary_stats_white_plant():
    m = SystemModel(np.zeros((2, 2)), (np.eye(2),), np.eye(2), np.eye(2), np.eye(2))
    st = stationary_stats(m)
    assert np.allclose(st.Sigma, np.eye(2)) and np.allclose(st.Pi_blocks[0], 2 * np.eye(2))


def test_correlated_R_uses_diagonal_blocks():
    R = np.array([[1.0, 0.4], [0.4, 2.0]])
    m = SystemModel([[0.5]], ([[1.0]], [[2.0]]), [[1.0]], R, [[1.0]])
    st = stationary_stats(m)
    assert st.Pi_blocks[0][0, 0] == pytest.approx(4 / 3 + 1.0)
    assert st.Pi_blocks[1][0, 0] == pytest.approx(4 * 4 / 3 + 2.0)


def test_simulated_covariance_matches_sigma():
    m = scalar_model()
    traj = simulate_plant(m, 100_000, np.random.default_rng(3))
    assert np.var(traj.x[:, 0]) == pytest.approx(4.0 / 3.0, rel=0.05)
    two = SystemModel([[0.6, 0.2], [0.0, 0.4]], (np.eye(2),), [[1.0, 0.3], [0.3, 0.5]], np.eye(2), np.eye(2))
    two = SystemModel(two.A, two.sensor_blocks, two.Q, two.R, stationary_stats(two).Sigma)
    traj = simulate_plant(two, 100_000, np.random.default_rng(4))
    S = stationary_stats(two).Sigma
    emp = np.cov(traj.x.T)
    assert np.all(np.abs(emp - S) <= 0.05 * np.abs(S) + 1e-12)


def test_simulation_deterministic():
    m = scalar_model()
    a = simulate_plant(m, 500, np.random.default_rng(9))
    b = simulate_plant(m, 500, np.random.default_rng(9))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_white_plant_uncorrelated():
    m = SystemModel([[0.0]], ([[1.0]],), [[1.0]], [[1.0]], [[1.0]])
    x = simulate_plant(m, 100_000, np.random.default_rng(5)).x[:, 0]
    assert abs(np.corrcoef(x[:-1], x[1:])[0, 1]) < 0.02


def test_model_is_immutable():
    m = scalar_model()
    with pytest.raises(ValueError):
        m.A[0, 0] = 2.0
