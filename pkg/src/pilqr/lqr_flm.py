"""KL-constrained LQR backward pass on fitted dynamics (LQR-FLM).

Each timestep gets its own KL bound ``eps_t`` against the previous policy.
For a dual value ``eta`` the constrained optimum is

    Sigma = (Quu / eta + P)^-1,            P = Sigma_prev^-1
    K     = -Sigma (Qux / eta - P K_prev)
    k     = -Sigma (Qu  / eta - P k_prev)

and ``eta_t`` is searched so that the mean KL at the supplied states hits
``eps_t``. The value function is propagated with the update that holds for
arbitrary (not necessarily Q-optimal) gains.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import TvlgPolicy, gaussian_kl_at_states, symmetrize
from .cost_approx import QuadCostApprox
from .dyn_fit import FittedDynamics
from .errors import ConfigurationError, ConstraintInfeasibleError, NumericalError


ETA_MIN = 1e-6
ETA_MAX = 1e6
KL_TOL = 0.05


@dataclass(frozen=True)
class LqrConfig:
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX
    kl_tol: float = KL_TOL
    mu_start: float = 1e-6
    mu_max: float = 1e2
    grid_points: int = 400


@dataclass(frozen=True, eq=False)
class BackwardPassState:
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Quu: np.ndarray
    Qxu: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray
    eta: np.ndarray
    eps: np.ndarray
    kl: np.ndarray
    # -1: eta pinned at lower bound, +1: at upper bound, 0: KL matched eps
    bracket_flag: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return np.abs(self.kl - self.eps) <= KL_TOL * self.eps


class _StepProblem:
    """The per-timestep constrained problem as a function of ``eta``.

    In the basis whitened by the previous covariance, ``Quu`` becomes
    ``diag(lam)`` and the KL of the eta-policy reduces to the scalar function

        0.5 * sum_j [log(1 + lam_j/eta) - lam_j/(lam_j + eta) + m_j/(lam_j + eta)^2]

    where ``m_j`` is the mean squared projection of ``Qux x + Qu + Quu
    (K_prev x + k_prev)`` over the states. Every term decreases in ``eta``.
    """

    def __init__(self, Quu, Qux, Qu, K_prev, k_prev, Sigma_prev, states, t):
        self.Quu, self.Qux, self.Qu = Quu, Qux, Qu
        self.K_prev, self.k_prev, self.Sigma_prev = K_prev, k_prev, Sigma_prev
        self.t = t
        try:
            L = np.linalg.cholesky(Sigma_prev)
        except np.linalg.LinAlgError:
            raise NumericalError("previous policy covariance is singular", t) from None
        Linv = np.linalg.solve(L, np.eye(L.shape[0]))
        self.P = Linv.T @ Linv
        lam, V = np.linalg.eigh(symmetrize(L.T @ Quu @ L))
        self.lam = lam
        # Quu / eta + P is positive definite exactly when eta > -min(lam)
        self.eta_floor = max(-lam.min(), 0.0)
        r = states @ (Qux + Quu @ K_prev).T + (Qu + Quu @ k_prev)
        y = r @ L @ V
        self.m = np.mean(y * y, axis=0)

    def policy(self, eta):
        P = self.P
        try:
            Lp = np.linalg.cholesky(symmetrize(self.Quu / eta + P))
        except np.linalg.LinAlgError:
            return None
        Linv = np.linalg.solve(Lp, np.eye(P.shape[0]))
        Sigma = Linv.T @ Linv
        K = -Sigma @ (self.Qux / eta - P @ self.K_prev)
        k = -Sigma @ (self.Qu / eta - P @ self.k_prev)
        return K, k, symmetrize(Sigma)

    def kl(self, eta):
        lam, m = self.lam, self.m
        if eta <= self.eta_floor:
            return np.inf
        val = np.log1p(lam / eta) - lam / (lam + eta) + m / (lam + eta) ** 2
        return max(0.5 * float(np.sum(val)), 0.0)


def solve_eta(problem: _StepProblem, eps: float, config: LqrConfig = LqrConfig()):
    """Find ``eta`` with ``|KL(eta) - eps| <= kl_tol * eps`` on a log bracket.

    Returns ``(eta, kl, flag)`` where ``flag`` is -1/+1 when the bracket's
    lower/upper endpoint is returned and 0 otherwise.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    eta_lo = config.eta_min
    if problem.eta_floor > 0:
        # indefinite Quu: only eta above the floor gives a valid covariance
        eta_lo = max(eta_lo, problem.eta_floor * (1 + 1e-6) + 1e-300)
    if eta_lo >= config.eta_max:
        raise ConstraintInfeasibleError("no positive definite policy covariance in eta bracket", problem.t)
    lo, hi = np.log(eta_lo), np.log(config.eta_max)
    kl_lo, kl_hi = problem.kl(eta_lo), problem.kl(config.eta_max)
    if kl_lo <= eps:
        return eta_lo, kl_lo, -1
    if kl_hi >= eps:
        return config.eta_max, kl_hi, 1

    def f(s):
        return np.log(max(problem.kl(np.exp(s)), 1e-300)) - np.log(eps)

    try:
        s = brentq(f, lo, hi, xtol=1e-12, rtol=1e-10, maxiter=200)
        eta = float(np.exp(s))
        kl = problem.kl(eta)
    except (ValueError, RuntimeError):
        kl = np.inf
    if abs(kl - eps) <= config.kl_tol * eps:
        return eta, kl, 0
    warnings.warn(f"KL not monotone in eta at timestep {problem.t}; using grid scan", RuntimeWarning)
    return _grid_scan(problem, eps, lo, hi, config)


def _grid_scan(problem, eps, lo, hi, config):
    best = None
    for s in np.linspace(lo, hi, config.grid_points):
        kl = problem.kl(np.exp(s))
        if kl <= eps * (1 + config.kl_tol):
            gap = abs(kl - eps)
            if best is None or gap < best[0]:
                best = (gap, float(np.exp(s)), kl)
    if best is None:
        return config.eta_max, problem.kl(config.eta_max), 1
    return best[1], best[2], 0


def _regularized_quu(Quu, config):
    """Levenberg-style ``Quu + mu I``; returns the last attempt if none is PD."""
    eye = np.eye(Quu.shape[0])
    mu = 0.0
    while True:
        try:
            np.linalg.cholesky(Quu + mu * eye)
            return Quu + mu * eye
        except np.linalg.LinAlgError:
            mu = config.mu_start if mu == 0 else mu * 10
            if mu > config.mu_max:
                return Quu + config.mu_max * eye


def backward_pass(
    dyn: FittedDynamics,
    cost: QuadCostApprox,
    prev: TvlgPolicy,
    eps,
    states,
    config: LqrConfig = LqrConfig(),
    return_state: bool = False,
):
    """One KL-constrained LQR update of ``prev``.

    ``states`` is an ``(N, T, dX)`` array of sampled states on which the
    per-timestep expected KL is evaluated (the batch of the current
    iteration). ``eps`` is a scalar or per-timestep array of KL bounds.
    """
    T, dX, dU = prev.T, prev.dX, prev.dU
    eps = np.broadcast_to(np.asarray(eps, float), (T,)).copy()
    if np.any(eps <= 0):
        raise ConfigurationError("KL bounds must be positive")
    states = np.asarray(states, float)
    if states.ndim == 2:
        states = states[None]
    if states.shape[1:] != (T, dX):
        raise ConfigurationError(f"states must have shape (N, {T}, {dX})")

    K = np.zeros((T, dU, dX))
    k = np.zeros((T, dU))
    Sigma = np.zeros((T, dU, dU))
    out = {n: [] for n in ("Qx", "Qu", "Qxx", "Quu", "Qxu", "Vx", "Vxx")}
    eta = np.zeros(T)
    kl = np.zeros(T)
    flag = np.zeros(T, dtype=int)

    Vxx_next = np.zeros((dX, dX))
    Vx_next = np.zeros(dX)
    ix, iu = slice(0, dX), slice(dX, dX + dU)
    for t in range(T - 1, -1, -1):
        Qtt, Qt, _ = cost.absolute(t)
        if t < T - 1:
            Fm = np.concatenate([dyn.fx[t], dyn.fu[t]], axis=1)
            Qtt = Qtt + Fm.T @ Vxx_next @ Fm
            Qt = Qt + Fm.T @ (Vx_next + Vxx_next @ dyn.fc[t])
        Qtt = symmetrize(Qtt)
        Qxx, Quu, Qxu = Qtt[ix, ix], Qtt[iu, iu], Qtt[ix, iu]
        Qx, Qu = Qt[ix], Qt[iu]
        Quu = _regularized_quu(Quu, config)
        if not np.all(np.isfinite(Quu)):
            raise NumericalError("non-finite Q-function", t)

        problem = _StepProblem(Quu, Qxu.T, Qu, prev.K[t], prev.k[t], prev.Sigma[t], states[:, t], t)
        eta[t], kl[t], flag[t] = solve_eta(problem, eps[t], config)
        sol = problem.policy(eta[t])
        if sol is None:
            raise ConstraintInfeasibleError("policy covariance not positive definite", t)
        K[t], k[t], Sigma[t] = sol

        Vxx = Qxx + K[t].T @ Quu @ K[t] + Qxu @ K[t] + K[t].T @ Qxu.T
        Vx = Qx + K[t].T @ Qu + K[t].T @ Quu @ k[t] + Qxu @ k[t]
        Vxx_next, Vx_next = symmetrize(Vxx), Vx
        for name, val in zip(out, (Qx, Qu, Qxx, Quu, Qxu, Vx_next, Vxx_next)):
            out[name].append(val)

    policy = TvlgPolicy(K, k, Sigma)
    if not return_state:
        return policy
    state = BackwardPassState(
        **{n: np.array(v[::-1]) for n, v in out.items()},
        eta=eta,
        eps=eps,
        kl=kl,
        bracket_flag=flag,
    )
    return policy, state
