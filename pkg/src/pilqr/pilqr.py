"""The hybrid update: LQR-FLM on the quadratic cost model, PI2 on what it misses.

One iteration samples the current policy, fits time-varying linear dynamics,
expands the cost, and splits each sampled cost-to-go ``S`` into the part the
model predicts (``S_hat``) and the residual ``S_tilde = S - S_hat``. LQR-FLM
produces an intermediate policy ``p_hat`` from the model; the stored noise
of every sample is replayed through ``p_hat`` to get controls ``u_hat``, and
those are reweighted by ``softmax(-S_tilde / eta)`` in a PI2 step.

The plain LQR-FLM and PI2 iterations used as baselines live here too so all
three share sampling, reporting and configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import RolloutBatch, TvlgPolicy, sample_rollouts
from .cost_approx import QuadCostApprox, expand_cost
from .dyn_fit import FittedDynamics, fit_dynamics
from .lqr_flm import LqrConfig, backward_pass
from .pi2 import Pi2Config, compute_weights, cost_to_go, pi2_weights, weighted_ml_update

DIVERGENCE_NORM = 1e6
# residuals this small relative to the cost-to-go are roundoff, not signal
RESIDUAL_RTOL = 1e-9
ALGORITHMS = ("pilqr", "lqr_flm", "pi2")


@dataclass(frozen=True)
class AlgorithmConfig:
    algorithm: str = "pilqr"
    n_samples: int = 20
    eps_init: float = 1.0
    eps_min: float = 1e-3
    eps_max: float = 10.0
    ratio_low: float = 0.2
    ratio_high: float = 0.5
    eps_multiplier: float = 2.0
    adapt_eps: bool = True
    # KL bound for the PI2 stage; None follows the (adapted) LQR-FLM schedule
    pi2_eps: float | None = None
    # False: reuse temperatures optimized on the full cost-to-go for the PI2 stage
    pi2_eta_on_residual: bool = True
    # the residual PI2 stage keeps the LQR-FLM gains and refits offsets and covariance
    residual_fit_gains: bool = False
    dynamics_reg: float = 1e-6
    covariance_floor: float = 1e-6
    lqr: LqrConfig = field(default_factory=LqrConfig)
    pi2: Pi2Config = field(default_factory=Pi2Config)

    def with_(self, **kw) -> "AlgorithmConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class IterationReport:
    iteration: int
    episodes: int
    mean_cost: float
    std_cost: float
    residual_ratio: float
    eps: np.ndarray
    eta_lqr: np.ndarray
    eta_pi2: np.ndarray

    @property
    def mean_eps(self) -> float:
        return float(np.mean(self.eps))

    @property
    def mean_eta_lqr(self) -> float:
        return float(np.mean(self.eta_lqr)) if self.eta_lqr.size else float("nan")

    @property
    def mean_eta_pi2(self) -> float:
        return float(np.mean(self.eta_pi2)) if self.eta_pi2.size else float("nan")

    def row(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_cost": self.mean_cost,
            "std_cost": self.std_cost,
            "mean_residual_ratio": self.residual_ratio,
            "mean_eps": self.mean_eps,
            "mean_eta_lqr": self.mean_eta_lqr,
            "mean_eta_pi2": self.mean_eta_pi2,
        }


@dataclass(frozen=True, eq=False)
class ResidualEvaluation:
    S: np.ndarray
    S_hat: np.ndarray
    S_tilde: np.ndarray
    diverged: np.ndarray
    u_hat: np.ndarray | None = None


def eval_shat(batch: RolloutBatch, dyn: FittedDynamics, cost: QuadCostApprox, prev: TvlgPolicy):
    """Model-predicted cost-to-go of every sample from every timestep.

    From each sampled ``(x_{i,t}, u_{i,t})`` the deterministic controller
    ``u = K x + k + chol(Sigma) xi_{i,j}`` of ``prev`` (the policy that
    generated the batch, with that sample's stored noise) is rolled forward
    under the mean fitted dynamics and the quadratic cost model is summed.
    All start times are simulated together. Returns ``(S_hat, diverged)``,
    both ``(N, T)``; ``diverged`` marks simulations whose state norm
    exceeded ``DIVERGENCE_NORM``.
    """
    N, T, dX = batch.X.shape
    sim = np.zeros((T, N, dX))
    S_hat = np.zeros((T, N))
    diverged = np.zeros((T, N), dtype=bool)
    for j in range(T):
        sim[j] = batch.X[:, j]
        x = sim[: j + 1]
        u = prev.action(x, batch.XI[:, j], j)
        u[j] = batch.U[:, j]
        with np.errstate(all="ignore"):
            S_hat[: j + 1] += cost.evaluate(x, u, j)
            if j < T - 1:
                sim[: j + 1] = dyn.predict(x, u, j)
        diverged[: j + 1] |= ~(np.linalg.norm(sim[: j + 1], axis=-1) <= DIVERGENCE_NORM)
    diverged |= ~np.isfinite(S_hat)
    return S_hat.T, diverged.T


def reparametrize_controls(batch: RolloutBatch, p_hat: TvlgPolicy) -> np.ndarray:
    """Replay each sample's stored noise through ``p_hat``: ``(N, T, dU)`` controls."""
    return np.stack([p_hat.action(batch.X[:, t], batch.XI[:, t], t) for t in range(batch.T)], axis=1)


def adjust_eps(
    eps_prev,
    S,
    S_tilde,
    eps_min=1e-3,
    eps_max=10.0,
    ratio_low=0.2,
    ratio_high=0.5,
    multiplier=2.0,
):
    """Grow KL steps where the model explains the cost-to-go, shrink them where it does not.

    Returns ``(eps, ratio)`` with ``ratio[t] = mean|S_tilde| / mean|S|``.
    """
    if not 0 < eps_min < eps_max:
        raise ValueError("need 0 < eps_min < eps_max")
    S = np.asarray(S, float)
    St = np.asarray(S_tilde, float)
    ok = np.isfinite(St)
    num = np.where(ok, np.abs(St), 0.0).sum(axis=0) / np.maximum(ok.sum(axis=0), 1)
    den = np.maximum(np.mean(np.abs(S), axis=0), np.finfo(float).tiny)
    ratio = num / den
    eps = np.array(np.broadcast_to(eps_prev, ratio.shape), dtype=float)
    eps = np.where(ratio < ratio_low, np.minimum(eps * multiplier, eps_max), eps)
    eps = np.where(ratio > ratio_high, np.maximum(eps / multiplier, eps_min), eps)
    return eps, ratio


def staged_weights(S_hat, S_tilde, eta):
    """PI2 weights computed in two stages: model part first, then residual.

    ``softmax(-S_hat / eta)`` reweighted by ``exp(-S_tilde / eta)`` and
    renormalized; mathematically equal to ``softmax(-(S_hat + S_tilde) / eta)``.
    """
    first = pi2_weights(S_hat, eta)
    St = np.asarray(S_tilde, float)
    second = np.exp(-(St - St.min()) / eta)
    w = first * second
    return w / w.sum()


def residual_evaluation(env, batch, dyn, cost, behavior: TvlgPolicy) -> ResidualEvaluation:
    S = cost_to_go(batch.C)
    S_hat, diverged = eval_shat(batch, dyn, cost, behavior)
    S_tilde = S - S_hat
    # the dual is scale invariant, so pure roundoff would otherwise still move the weights
    S_tilde[np.abs(S_tilde) <= RESIDUAL_RTOL * np.abs(S).max(axis=0)] = 0.0
    S_tilde[diverged] = np.inf
    return ResidualEvaluation(S, S_hat, S_tilde, diverged)


def pilqr_update(env, batch, behavior: TvlgPolicy, eps, config: AlgorithmConfig, reference=None):
    """The model-based then model-free update computed from one batch.

    ``behavior`` generated the batch; ``reference`` (default ``behavior``)
    is the policy the KL constraints are measured against. Returns
    ``(policy, eps, info)``.
    """
    reference = behavior if reference is None else reference
    dyn = fit_dynamics(batch, config.dynamics_reg)
    approx = expand_cost(env, batch)
    res = residual_evaluation(env, batch, dyn, approx, behavior)
    if config.adapt_eps:
        eps, ratio = adjust_eps(
            eps,
            res.S,
            res.S_tilde,
            config.eps_min,
            config.eps_max,
            config.ratio_low,
            config.ratio_high,
            config.eps_multiplier,
        )
    else:
        eps = np.broadcast_to(np.asarray(eps, float), (batch.T,)).copy()
        ratio = adjust_eps(eps, res.S, res.S_tilde, config.eps_min, config.eps_max)[1]

    pi2_eps = eps if config.pi2_eps is None else np.full(batch.T, config.pi2_eps)
    if config.pi2_eta_on_residual:
        weights = compute_weights(res.S_tilde, pi2_eps, config.pi2.log10_eta_bounds)
    else:
        full = compute_weights(res.S, pi2_eps, config.pi2.log10_eta_bounds)
        W = np.stack([pi2_weights(res.S_tilde[:, t], full.eta[t]) for t in range(batch.T)], axis=1)
        weights = replace(full, w=W)

    p_hat, lqr_state = backward_pass(
        dyn, approx, reference, eps, batch.X, config.lqr, return_state=True
    )
    u_hat = reparametrize_controls(batch, p_hat)
    stage = replace(config.pi2, fit_gains=config.residual_fit_gains)
    policy = weighted_ml_update(batch.X, u_hat, weights.w, p_hat, stage)
    info = {
        "dynamics": dyn,
        "cost": approx,
        "residuals": replace(res, u_hat=u_hat),
        "ratio": ratio,
        "p_hat": p_hat,
        "lqr_state": lqr_state,
        "weights": weights,
    }
    return policy.with_covariance_floor(config.covariance_floor), eps, info


def lqr_flm_update(env, batch, behavior: TvlgPolicy, eps, config: AlgorithmConfig, reference=None):
    reference = behavior if reference is None else reference
    dyn = fit_dynamics(batch, config.dynamics_reg)
    approx = expand_cost(env, batch)
    res = residual_evaluation(env, batch, dyn, approx, behavior)
    eps = np.broadcast_to(np.asarray(eps, float), (batch.T,)).copy()
    ratio = adjust_eps(eps, res.S, res.S_tilde, config.eps_min, config.eps_max)[1]
    policy, lqr_state = backward_pass(dyn, approx, reference, eps, batch.X, config.lqr, return_state=True)
    info = {"dynamics": dyn, "cost": approx, "residuals": res, "ratio": ratio, "lqr_state": lqr_state}
    return policy.with_covariance_floor(config.covariance_floor), eps, info


def pi2_only_update(env, batch, behavior: TvlgPolicy, eps, config: AlgorithmConfig, reference=None):
    reference = behavior if reference is None else reference
    eps = np.broadcast_to(np.asarray(eps, float), (batch.T,)).copy()
    pi2_eps = eps if config.pi2_eps is None else np.full(batch.T, config.pi2_eps)
    S = cost_to_go(batch.C)
    weights = compute_weights(S, pi2_eps, config.pi2.log10_eta_bounds)
    policy = weighted_ml_update(batch.X, batch.U, weights.w, reference, config.pi2)
    info = {"weights": weights, "ratio": np.full(batch.T, np.nan), "S": S}
    return policy.with_covariance_floor(config.covariance_floor), eps, info


UPDATES = {"pilqr": pilqr_update, "lqr_flm": lqr_flm_update, "pi2": pi2_only_update}


def run_iteration(env, policy, config: AlgorithmConfig, seed, eps=None, iteration=0, condition_id="0"):
    """Sample ``policy`` and apply the configured update; returns ``(policy, report)``.

    ``eps`` carries the per-timestep KL steps between iterations (initialized
    to ``config.eps_init``). On a numerical error the exception propagates
    and the caller still holds the unchanged input policy.
    """
    if config.algorithm not in UPDATES:
        raise ValueError(f"unknown algorithm {config.algorithm!r}")
    if eps is None:
        eps = np.full(policy.T, config.eps_init)
    batch = sample_rollouts(policy, env, config.n_samples, seed, condition_id)
    new_policy, eps, info = UPDATES[config.algorithm](env, batch, policy, eps, config)
    totals = batch.total_costs()
    lqr_state = info.get("lqr_state")
    weights = info.get("weights")
    ratio = info["ratio"]
    report = IterationReport(
        iteration=iteration,
        episodes=batch.N,
        mean_cost=float(totals.mean()),
        std_cost=float(totals.std()),
        residual_ratio=float(np.nanmean(ratio)) if np.isfinite(ratio).any() else float("nan"),
        eps=np.asarray(eps, float),
        eta_lqr=lqr_state.eta if lqr_state is not None else np.array([]),
        eta_pi2=weights.eta if weights is not None else np.array([]),
    )
    return new_policy, report


def pilqr_iteration(env, policy, config: AlgorithmConfig = AlgorithmConfig(), seed=0, eps=None, iteration=0):
    """One full hybrid iteration (``config.algorithm`` is forced to ``"pilqr"``)."""
    return run_iteration(env, policy, config.with_(algorithm="pilqr"), seed, eps, iteration)
