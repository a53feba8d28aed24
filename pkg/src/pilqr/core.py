"""Time-varying linear-Gaussian policies, rollouts and conditional KL.

Array conventions used throughout the package:

* states ``X``: ``(N, T, dX)``, actions ``U`` and noise ``XI``: ``(N, T, dU)``,
  step costs ``C``: ``(N, T)``;
* a policy stores ``K``: ``(T, dU, dX)``, ``k``: ``(T, dU)``,
  ``Sigma``: ``(T, dU, dU)``.

The square root of a covariance is always its lower Cholesky factor, so an
action is reproduced bit for bit from the stored standard-normal draw ``xi``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, NumericalError, RolloutDivergenceError

SCHEMA_VERSION = 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def floor_covariance(Sigma, floor):
    """Clamp eigenvalues of each covariance in ``Sigma`` from below."""
    Sigma = symmetrize(np.asarray(Sigma, dtype=float))
    if floor < 0:
        return Sigma
    w, V = np.linalg.eigh(Sigma)
    w = np.maximum(w, floor)
    return symmetrize((V * w[..., None, :]) @ np.swapaxes(V, -1, -2))


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


@dataclass(frozen=True, eq=False)
class TvlgPolicy:
    """Controller ``u_t ~ N(K_t x_t + k_t, Sigma_t)`` for ``t = 0..T-1``."""

    K: np.ndarray
    k: np.ndarray
    Sigma: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = _frozen(self.K)
        k = _frozen(self.k)
        Sigma = _frozen(symmetrize(np.asarray(self.Sigma, dtype=float)))
        if K.ndim != 3 or k.ndim != 2 or Sigma.ndim != 3:
            raise ConfigurationError("policy arrays must be (T,dU,dX), (T,dU), (T,dU,dU)")
        T, dU, dX = K.shape
        if k.shape != (T, dU) or Sigma.shape != (T, dU, dU):
            raise ConfigurationError(
                f"inconsistent policy shapes K{K.shape} k{k.shape} Sigma{Sigma.shape}"
            )
        chol = np.empty_like(Sigma)
        for t in range(T):
            try:
                chol[t] = np.linalg.cholesky(Sigma[t])
            except np.linalg.LinAlgError:
                raise NumericalError("policy covariance is not positive definite", t) from None
        chol.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "chol", chol)

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def dU(self) -> int:
        return self.K.shape[1]

    @property
    def dX(self) -> int:
        return self.K.shape[2]

    @classmethod
    def initial(cls, T, dX, dU, variance=1.0, k=None) -> "TvlgPolicy":
        """Zero-gain policy with isotropic covariance."""
        kk = np.zeros((T, dU)) if k is None else np.broadcast_to(k, (T, dU))
        return cls(np.zeros((T, dU, dX)), kk, np.tile(variance * np.eye(dU), (T, 1, 1)))

    def mean_action(self, x, t):
        """Mean action at time ``t`` for one state or a stack of states."""
        return np.asarray(x) @ self.K[t].T + self.k[t]

    def action(self, x, xi, t):
        return self.mean_action(x, t) + np.asarray(xi) @ self.chol[t].T

    def with_covariance_floor(self, floor) -> "TvlgPolicy":
        return TvlgPolicy(self.K, self.k, floor_covariance(self.Sigma, floor))

    def equals(self, other: "TvlgPolicy") -> bool:
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.Sigma, other.Sigma)
        )

    def to_dict(self) -> dict:
        return {
            "schema": "TvlgPolicy",
            "version": SCHEMA_VERSION,
            "T": self.T,
            "K": self.K.tolist(),
            "k": self.k.tolist(),
            "Sigma": self.Sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TvlgPolicy":
        policy = cls(np.array(d["K"], float), np.array(d["k"], float), np.array(d["Sigma"], float))
        if "T" in d and d["T"] != policy.T:
            raise ConfigurationError(f"declared horizon {d['T']} does not match arrays ({policy.T})")
        return policy


@dataclass(frozen=True, eq=False)
class Rollout:
    """One trajectory; a read-only view into a :class:`RolloutBatch`."""

    states: np.ndarray
    actions: np.ndarray
    noise: np.ndarray
    step_costs: np.ndarray

    def cost_to_go(self) -> np.ndarray:
        return np.cumsum(self.step_costs[::-1])[::-1]


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """N trajectories of a single condition, stored as stacked arrays."""

    X: np.ndarray
    U: np.ndarray
    XI: np.ndarray
    C: np.ndarray
    condition_id: str = "0"
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("X", "U", "XI", "C"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        N, T, _ = self.X.shape
        if self.U.shape[:2] != (N, T) or self.XI.shape != self.U.shape or self.C.shape != (N, T):
            raise ConfigurationError("rollouts in a batch must share N, T and dimensions")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def dX(self) -> int:
        return self.X.shape[2]

    @property
    def dU(self) -> int:
        return self.U.shape[2]

    @property
    def rollouts(self) -> list[Rollout]:
        return [Rollout(self.X[i], self.U[i], self.XI[i], self.C[i]) for i in range(self.N)]

    def __iter__(self) -> Iterator[Rollout]:
        return iter(self.rollouts)

    def __len__(self) -> int:
        return self.N

    def total_costs(self) -> np.ndarray:
        return self.C.sum(axis=1)

    def equals(self, other: "RolloutBatch") -> bool:
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("X", "U", "XI", "C")
        ) and (self.condition_id, self.rng_seed) == (other.condition_id, other.rng_seed)

    def to_dict(self) -> dict:
        return {
            "schema": "RolloutBatch",
            "version": SCHEMA_VERSION,
            "condition_id": self.condition_id,
            "rng_seed": self.rng_seed,
            "rollouts": [
                {
                    "states": r.states.tolist(),
                    "actions": r.actions.tolist(),
                    "noise": r.noise.tolist(),
                    "step_costs": r.step_costs.tolist(),
                }
                for r in self.rollouts
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutBatch":
        rs = d["rollouts"]
        return cls(
            X=np.array([r["states"] for r in rs], float),
            U=np.array([r["actions"] for r in rs], float),
            XI=np.array([r["noise"] for r in rs], float),
            C=np.array([r["step_costs"] for r in rs], float),
            condition_id=str(d.get("condition_id", "0")),
            rng_seed=int(d.get("rng_seed", 0)),
        )


def dumps(obj) -> str:
    return json.dumps(obj.to_dict())


def sample_rollouts(policy: TvlgPolicy, env, n: int, seed: int, condition_id="0") -> RolloutBatch:
    """Run ``policy`` on ``env`` ``n`` times, recording the noise draws.

    Rollout ``i`` draws everything (action noise, initial-state and process
    noise) from its own stream ``(seed, i)``, so a batch is reproducible and
    independent of the order in which rollouts are generated. All rollouts are
    stepped together as one vectorized batch.
    """
    if n < 1:
        raise ConfigurationError(f"need at least one rollout, got n={n}")
    if (env.dim_x, env.dim_u) != (policy.dX, policy.dU):
        raise ConfigurationError(
            f"env dims (x={env.dim_x}, u={env.dim_u}) do not match policy "
            f"(x={policy.dX}, u={policy.dU})"
        )
    if env.horizon != policy.T:
        raise ConfigurationError(f"env horizon {env.horizon} != policy horizon {policy.T}")
    T, dX, dU = policy.T, policy.dX, policy.dU

    XI = np.empty((n, T, dU))
    X0N = np.empty((n, dX))
    W = np.empty((n, T, dX))
    for i in range(n):
        g = rng_for(seed, i)
        XI[i] = g.standard_normal((T, dU))
        X0N[i] = g.standard_normal(dX)
        W[i] = g.standard_normal((T, dX))

    X = np.empty((n, T, dX))
    U = np.empty((n, T, dU))
    C = np.empty((n, T))
    x = env.initial_state() + env.x0_noise * X0N
    for t in range(T):
        if not np.all(np.isfinite(x)):
            raise RolloutDivergenceError("non-finite state from environment", t)
        X[:, t] = x
        u = policy.action(x, XI[:, t], t)
        U[:, t] = u
        C[:, t] = env.cost(x, u, t)
        if t < T - 1:
            x = env.step(x, u, t) + env.noise_scale * W[:, t]
    if not np.all(np.isfinite(C)):
        bad = int(np.argwhere(~np.isfinite(C))[0, 1])
        raise RolloutDivergenceError("non-finite cost", bad)
    if getattr(env, "nonnegative_costs", False) and np.any(C < 0):
        bad = int(np.argwhere(C < 0)[0, 1])
        raise NumericalError("environment declared nonnegative costs but produced a negative one", bad)
    return RolloutBatch(X, U, XI, C, condition_id=str(condition_id), rng_seed=int(seed))


def _gaussian_kl_terms(Sigma_new, Sigma_old, t):
    try:
        L_old = np.linalg.cholesky(Sigma_old)
    except np.linalg.LinAlgError:
        raise NumericalError("reference covariance is singular", t) from None
    L_new = np.linalg.cholesky(Sigma_new)
    P_old = np.linalg.inv(Sigma_old)
    d = Sigma_new.shape[0]
    logdet_old = 2.0 * np.sum(np.log(np.diag(L_old)))
    logdet_new = 2.0 * np.sum(np.log(np.diag(L_new)))
    return P_old, logdet_old - logdet_new - d + np.trace(P_old @ Sigma_new)


def gaussian_kl_at_states(K, k, Sigma, K_old, k_old, Sigma_old, states, t=None):
    """Mean over ``states`` of KL(N(Kx+k, Sigma) || N(K_old x + k_old, Sigma_old))."""
    P_old, const = _gaussian_kl_terms(Sigma, Sigma_old, t)
    diff = np.atleast_2d(states) @ (K_old - K).T + (k_old - k)
    quad = np.einsum("ni,ij,nj->n", diff, P_old, diff)
    return max(0.5 * (const + quad.mean()), 0.0)


def conditional_kl(p_new: TvlgPolicy, p_old: TvlgPolicy, states, t: int) -> float:
    """Average conditional KL between two policies at time ``t``, in nats."""
    if (p_new.dX, p_new.dU) != (p_old.dX, p_old.dU):
        raise ConfigurationError("policies have different dimensions")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ConfigurationError("need at least one state")
    return float(
        gaussian_kl_at_states(
            p_new.K[t], p_new.k[t], p_new.Sigma[t], p_old.K[t], p_old.k[t], p_old.Sigma[t], states, t
        )
    )
