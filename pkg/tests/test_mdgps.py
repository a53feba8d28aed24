import numpy as np
import pytest

from pilqr.core import TvlgPolicy, sample_rollouts
from pilqr.envs import make_reacher_env
from pilqr.errors import ConfigurationError, NumericalError
from pilqr.mdgps import (
    GlobalPolicy,
    MdgpsConfig,
    fit_global,
    linearize_global,
    linearized_policy,
    mdgps_iteration,
    rollout_global,
    rollout_mean,
)
from pilqr.pilqr import AlgorithmConfig, pilqr_update

from conftest import random_spd


def affine(K, k):
    return GlobalPolicy(K.shape[1], K.shape[0], theta=np.concatenate([K.ravel(), k]))


# linearization


def test_affine_policy_linearizes_exactly(rng):
    K, k = rng.standard_normal((2, 4)), rng.standard_normal(2)
    Kl, kl, Sigma = linearize_global(affine(K, k), rng.standard_normal((30, 4)))
    assert np.allclose(Kl, K, atol=1e-10) and np.allclose(kl, k, atol=1e-10)
    assert np.array_equal(Sigma, np.eye(2))


def test_constant_policy(rng):
    c = np.array([0.3, -1.2])
    Kl, kl, _ = linearize_global(affine(np.zeros((2, 3)), c), rng.standard_normal((10, 3)))
    assert np.allclose(Kl, 0, atol=1e-12) and np.allclose(kl, c, atol=1e-12)


def test_single_state_falls_back_to_jacobian(rng):
    gp = GlobalPolicy(3, 2, hidden=(8, 8), seed=4)
    x = rng.standard_normal(3)
    Kl, kl, _ = linearize_global(gp, x[None])
    assert np.allclose(Kl, gp.jacobian(x), atol=1e-5)
    assert np.allclose(Kl @ x + kl, gp(x), atol=1e-10)


def test_mlp_linearization_close_at_batch_states(rng):
    gp = GlobalPolicy(3, 2, hidden=(16, 16), seed=1)
    centre = rng.standard_normal(3)
    X = centre + 0.01 * rng.standard_normal((40, 3))
    K, k, _ = linearize_global(gp, X)
    err = np.abs(X @ K.T + k - gp(X)).max()
    # a ReLU net is piecewise affine; inside a tiny ball the error is tiny too
    assert err < 1e-3


def test_jacobian_matches_finite_differences(rng):
    gp = GlobalPolicy(4, 2, hidden=(12, 12), seed=2, x_mean=rng.standard_normal(4), x_scale=rng.uniform(0.5, 2, 4))
    x = rng.standard_normal(4)
    h = 1e-6
    fd = np.stack([(gp(x + h * e) - gp(x - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.allclose(gp.jacobian(x), fd, atol=1e-6)


def test_gradient_matches_finite_differences(rng):
    gp = GlobalPolicy(3, 2, hidden=(5, 4), seed=3)
    X, U = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
    P = np.stack([random_spd(rng, 2) for _ in range(7)])
    w = rng.uniform(0, 1, 7)
    _, g = gp.loss_and_grad(X, U, P, w)
    h = 1e-6
    for j in rng.choice(gp.n_params, 12, replace=False):
        e = np.zeros(gp.n_params)
        e[j] = h
        up = gp.loss_and_grad(X, U, P, w, gp.theta + e)[0]
        dn = gp.loss_and_grad(X, U, P, w, gp.theta - e)[0]
        assert g[j] == pytest.approx((up - dn) / (2 * h), abs=1e-6)


# supervised fit


def test_affine_fit_recovers_realizable_target(rng):
    K, k = rng.standard_normal((2, 3)), rng.standard_normal(2)
    X = rng.standard_normal((60, 3))
    U = X @ K.T + k
    fit = fit_global(GlobalPolicy(3, 2), X, U, np.tile(np.eye(2), (60, 1, 1)), epochs=2000)
    assert np.abs(fit.gp(X) - U).max() < 1e-6


def test_zero_weight_samples_do_not_matter(rng):
    X, U = rng.standard_normal((20, 2)), rng.standard_normal((20, 1))
    P = np.ones((20, 1, 1))
    w = np.r_[np.ones(15), np.zeros(5)]
    a = fit_global(GlobalPolicy(2, 1), X, U, P, w, epochs=50).gp
    U2 = U.copy()
    U2[15:] += 100.0
    b = fit_global(GlobalPolicy(2, 1), X, U2, P, w, epochs=50).gp
    assert np.array_equal(a.theta, b.theta)


def test_conflicting_policies_give_precision_weighted_average(rng):
    X = rng.standard_normal((40, 3))
    K1, K2 = rng.standard_normal((2, 2, 3))
    k1, k2 = rng.standard_normal((2, 2))
    P1, P2 = random_spd(rng, 2), random_spd(rng, 2)
    XX = np.concatenate([X, X])
    UU = np.concatenate([X @ K1.T + k1, X @ K2.T + k2])
    PP = np.concatenate([np.tile(P1, (40, 1, 1)), np.tile(P2, (40, 1, 1))])
    fit = fit_global(GlobalPolicy(3, 2), XX, UU, PP, epochs=3000)
    M = np.linalg.inv(P1 + P2)
    expected = (X @ K1.T + k1) @ (M @ P1).T + (X @ K2.T + k2) @ (M @ P2).T
    assert np.abs(fit.gp(X) - expected).max() < 1e-5


def test_loss_never_increases(rng):
    X, U = rng.standard_normal((50, 4)), rng.standard_normal((50, 2))
    fit = fit_global(GlobalPolicy(4, 2, hidden=(16, 16)), X, U, np.tile(np.eye(2), (50, 1, 1)), lr=5.0)
    assert np.all(np.diff(fit.losses) <= 0)
    assert fit.losses[-1] < fit.losses[0]


def test_non_finite_loss_aborts(rng):
    X = rng.standard_normal((5, 2))
    U = np.full((5, 1), np.nan)
    with pytest.raises(NumericalError, match="epoch 0"):
        fit_global(GlobalPolicy(2, 1), X, U, np.ones((5, 1, 1)))


def test_all_zero_weights_rejected(rng):
    with pytest.raises(ConfigurationError):
        fit_global(GlobalPolicy(2, 1), np.ones((3, 2)), np.ones((3, 1)), np.ones((3, 1, 1)), np.zeros(3))


def test_checkpoint_round_trip(tmp_path, rng):
    gp = fit_global(GlobalPolicy(3, 2, hidden=(4, 4)), rng.standard_normal((10, 3)), rng.standard_normal((10, 2)), np.tile(np.eye(2), (10, 1, 1)), epochs=5).gp
    gp.save(tmp_path / "gp.json")
    back = GlobalPolicy.load(tmp_path / "gp.json")
    x = rng.standard_normal(3)
    assert np.array_equal(back(x), gp(x)) and back.fitted


# iteration


def _reacher_conditions():
    return [make_reacher_env({"target": t}, horizon=30) for t in ([0.8, 0.6], [1.4, 1.2])]


def test_first_iteration_matches_plain_pilqr(quiet):
    env = make_reacher_env({"target": [1.0, 0.9]}, horizon=30)
    local = TvlgPolicy.initial(30, 6, 2)
    # the zero affine map linearizes to exactly the initial local mean
    gp = GlobalPolicy(6, 2)
    config = MdgpsConfig(AlgorithmConfig(n_samples=6), local_reference_until_fitted=False)
    locals_, _, _, _, _ = mdgps_iteration([env], [local], gp, config, seed=5)
    batch = sample_rollouts(local, env, 6, 5 * 1000, "0")
    plain, _, _ = pilqr_update(env, batch, local, np.full(30, 1.0), config.algorithm)
    assert np.allclose(locals_[0].K, plain.K, atol=1e-8) and np.allclose(locals_[0].k, plain.k, atol=1e-8)


def test_local_reference_until_global_fitted(quiet):
    envs = _reacher_conditions()
    locals_ = [TvlgPolicy.initial(30, 6, 2) for _ in envs]
    config = MdgpsConfig(AlgorithmConfig(n_samples=4), epochs=20)
    new_locals, gp, eps, reports, fit = mdgps_iteration(envs, locals_, GlobalPolicy(6, 2), config, seed=0)
    assert gp.fitted and len(new_locals) == 2 and len(reports) == 2
    assert linearized_policy(gp, sample_rollouts(new_locals[0], envs[0], 3, 0).X, new_locals[0].Sigma).K.shape == (30, 2, 6)


def test_iteration_is_deterministic(quiet):
    envs = _reacher_conditions()
    config = MdgpsConfig(AlgorithmConfig(n_samples=3), hidden=(8, 8), epochs=30)

    def run():
        locals_, gp, eps = [TvlgPolicy.initial(30, 6, 2) for _ in envs], GlobalPolicy(6, 2, hidden=(8, 8)), None
        for it in range(2):
            locals_, gp, eps, _, _ = mdgps_iteration(envs, locals_, gp, config, seed=it, eps_list=eps, iteration=it)
        return locals_, gp

    (la, ga), (lb, gb) = run(), run()
    assert all(a.equals(b) for a, b in zip(la, lb))
    assert np.array_equal(ga.theta, gb.theta)


def test_rollouts_of_matching_policies_agree(rng):
    env = make_reacher_env({"target": [1.0, 1.0]}, horizon=20)
    K, k = 0.1 * rng.standard_normal((2, 6)), 0.1 * rng.standard_normal(2)
    tv = TvlgPolicy(np.tile(K, (20, 1, 1)), np.tile(k, (20, 1)), np.tile(np.eye(2), (20, 1, 1)))
    Xg, Ug, Cg = rollout_global(affine(K, k), env)
    Xl, Ul, Cl = rollout_mean(tv, env)
    assert np.allclose(Xg, Xl, atol=1e-12) and np.allclose(Cg, Cl, atol=1e-12)
