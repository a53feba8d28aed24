import numpy as np
import pytest

from pilqr.core import RolloutBatch, TvlgPolicy, sample_rollouts
from pilqr.dyn_fit import fit_dynamics
from pilqr.envs import make_lq_env
from pilqr.errors import ConfigurationError, SingularityError

from conftest import random_lq


def test_recovers_exact_linear_system(rng):
    env = random_lq(rng, 3, 2, 6, x0_noise=1.0)
    b = sample_rollouts(TvlgPolicy.initial(6, 3, 2), env, 12, 0)
    dyn = fit_dynamics(b, reg=0.0)
    assert np.max(np.abs(dyn.fx - env.A[:-1])) < 1e-8
    assert np.max(np.abs(dyn.fu - env.B[:-1])) < 1e-8
    assert np.max(np.abs(dyn.fc)) < 1e-8


def test_constant_dynamics():
    env = make_lq_env(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1), x0_noise=1.0, horizon=5)
    b = sample_rollouts(TvlgPolicy.initial(5, 2, 1), env, 10, 1)
    dyn = fit_dynamics(b, reg=0.0)
    assert np.allclose(dyn.fx, np.eye(2), atol=1e-8)
    assert np.allclose(dyn.fu, 0, atol=1e-8)
    assert np.allclose(dyn.fc, 0, atol=1e-8)


def test_noise_covariance_estimate(rng):
    sigma = 0.3
    env = random_lq(rng, 2, 1, 4, noise=sigma, x0_noise=1.0)
    true = sigma**2 * np.eye(2)
    within = []
    for seed in range(20):
        dyn = fit_dynamics(sample_rollouts(TvlgPolicy.initial(4, 2, 1), env, 200, seed))
        within += [np.linalg.norm(F - true) <= 0.2 * np.linalg.norm(true) for F in dyn.F]
    # a single 200-sample estimate has ~10% relative spread per entry
    assert np.mean(within) >= 0.9


def test_residual_mean_zero_and_order_invariance(rng):
    env = random_lq(rng, 3, 2, 5, noise=0.2, x0_noise=0.5)
    b = sample_rollouts(TvlgPolicy.initial(5, 3, 2), env, 15, 2)
    dyn = fit_dynamics(b)
    for t in range(4):
        r = b.X[:, t + 1] - dyn.predict(b.X[:, t], b.U[:, t], t)
        assert np.allclose(r.mean(axis=0), 0, atol=1e-10)
    perm = rng.permutation(15)
    shuffled = RolloutBatch(b.X[perm], b.U[perm], b.XI[perm], b.C[perm])
    other = fit_dynamics(shuffled)
    assert np.allclose(other.fx, dyn.fx, atol=1e-10) and np.allclose(other.F, dyn.F, atol=1e-10)


def test_covariance_symmetric_psd(rng):
    env = random_lq(rng, 3, 1, 4, noise=0.1, x0_noise=0.5)
    dyn = fit_dynamics(sample_rollouts(TvlgPolicy.initial(4, 3, 1), env, 8, 0))
    for F in dyn.F:
        assert np.array_equal(F, F.T)
        assert np.linalg.eigvalsh(F).min() > 0


def test_rank_deficient_design_without_reg():
    env = make_lq_env(np.eye(2), np.eye(2), np.eye(2), np.eye(2), horizon=4)
    # three rollouts cannot span the 4-dimensional (x, u) space
    b = sample_rollouts(TvlgPolicy.initial(4, 2, 2), env, 3, 0)
    with pytest.raises(SingularityError, match="timestep 0"):
        fit_dynamics(b, reg=0.0)
    fit_dynamics(b, reg=1e-6)


def test_needs_two_rollouts():
    env = make_lq_env(np.eye(1), np.eye(1), np.eye(1), np.eye(1), horizon=3)
    with pytest.raises(ConfigurationError):
        fit_dynamics(sample_rollouts(TvlgPolicy.initial(3, 1, 1), env, 1, 0))
