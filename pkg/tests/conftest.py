import warnings

import numpy as np
import pytest

from pilqr.core import TvlgPolicy
from pilqr.cost_approx import QuadCostApprox
from pilqr.dyn_fit import FittedDynamics
from pilqr.envs import make_lq_env


def random_spd(rng, d, lo=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + lo * np.eye(d)


def random_lq(rng, dX, dU, T, noise=0.0, x0_noise=0.0):
    """Time-varying LQ env with stable-ish random matrices."""
    A = np.eye(dX) + 0.1 * rng.standard_normal((T, dX, dX))
    B = 0.5 * rng.standard_normal((T, dX, dU))
    Q = np.stack([random_spd(rng, dX) for _ in range(T)])
    R = np.stack([random_spd(rng, dU) for _ in range(T)])
    x0 = rng.standard_normal(dX)
    return make_lq_env(A, B, Q, R, noise_scale=noise, x0=x0, x0_noise=x0_noise, horizon=T)


def exact_dynamics(env):
    T, dX = env.horizon, env.dim_x
    return FittedDynamics(
        env.A[:-1].copy(), env.B[:-1].copy(), np.zeros((T - 1, dX)), np.tile(1e-8 * np.eye(dX), (T - 1, 1, 1))
    )


def exact_cost(env):
    """The LQ cost written as an expansion about the origin (exact everywhere)."""
    T, dX, dU = env.horizon, env.dim_x, env.dim_u
    return QuadCostApprox(
        np.zeros(T),
        np.zeros((T, dX)),
        np.zeros((T, dU)),
        env.Q.copy(),
        env.R.copy(),
        np.zeros((T, dX, dU)),
        np.zeros((T, dX)),
        np.zeros((T, dU)),
    )


def riccati_gains(env, return_value=False):
    """Textbook finite-horizon discrete Riccati recursion (no cross or linear terms).

    With ``return_value`` also returns ``P_0`` (optimal cost-to-go ``0.5 x'P_0 x``).
    """
    T = env.horizon
    P = np.zeros((env.dim_x, env.dim_x))
    gains = [None] * T
    for t in range(T - 1, -1, -1):
        A, B, Q, R = env.A[t], env.B[t], env.Q[t], env.R[t]
        if t == T - 1:
            # no successor state enters the cost
            gains[t] = np.zeros((env.dim_u, env.dim_x))
            P = Q
            continue
        S = R + B.T @ P @ B
        K = -np.linalg.solve(S, B.T @ P @ A)
        gains[t] = K
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
    if return_value:
        return np.array(gains), P
    return np.array(gains)


def random_policy(rng, T, dX, dU, scale=0.3):
    K = scale * rng.standard_normal((T, dU, dX))
    k = scale * rng.standard_normal((T, dU))
    Sigma = np.stack([random_spd(rng, dU, 0.2) for _ in range(T)])
    return TvlgPolicy(K, k, Sigma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line; all lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(label, ok, detail):
        lines.append(f"{label}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int(s.split()[1].rstrip(":ab")), s)):
            terminalreporter.write_line(line)
