"""KL-constrained path-integral policy improvement.

Sampled controls are reweighted per timestep by ``softmax(-S / eta_t)`` of
their cost-to-go ``S`` and a new linear-Gaussian policy is fitted to them by
weighted maximum likelihood. The temperature ``eta_t`` minimizes the dual

    g(eta) = eta * eps + eta * log mean_i exp(-S_i / eta)

whose stationary point is exactly where the weights' KL divergence from the
uniform distribution equals ``eps``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import TvlgPolicy, floor_covariance, symmetrize
from .errors import ConfigurationError, NumericalError

LOG10_ETA_BOUNDS = (-6.0, 6.0)


@dataclass(frozen=True)
class Pi2Config:
    log10_eta_bounds: tuple = LOG10_ETA_BOUNDS
    reg: float = 1e-6
    fit_gains: bool = True
    covariance_damping: float = 0.9
    covariance_floor: float = 1e-6
    min_ess: float = 2.0


@dataclass(frozen=True, eq=False)
class Pi2Weights:
    """Weights ``w[i, t]`` (columns sum to one) with their temperatures."""

    w: np.ndarray
    eta: np.ndarray
    eps: np.ndarray

    def ess(self) -> np.ndarray:
        return 1.0 / np.sum(self.w**2, axis=0)


def cost_to_go(costs) -> np.ndarray:
    """Suffix sums ``S[i, t] = sum_{j >= t} c[i, j]``; accepts a batch or an ``(N, T)`` table."""
    C = np.asarray(getattr(costs, "C", costs), dtype=float)
    return np.flip(np.cumsum(np.flip(C, axis=-1), axis=-1), axis=-1)


def dual_value(eta, S, eps):
    """Sample-based dual ``g(eta)`` for the columns of ``S``, with the max-shift trick.

    ``S`` is ``(N,)`` or ``(N, T)``; ``eta`` and ``eps`` broadcast against the
    columns. Non-finite entries of ``S`` are ignored.
    """
    S = np.asarray(S, dtype=float)
    finite = np.isfinite(S)
    s_min = np.min(np.where(finite, S, np.inf), axis=0)
    shifted = np.where(finite, S - s_min, np.inf)
    with np.errstate(over="ignore"):
        total = np.sum(np.exp(-shifted / eta), axis=0)
    return eta * eps - s_min + eta * (np.log(total) - np.log(finite.sum(axis=0)))


_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def dual_etas(S, eps, bounds=LOG10_ETA_BOUNDS, iterations=90) -> np.ndarray:
    """Per-column temperatures minimizing :func:`dual_value` over ``log10 eta``.

    Golden-section search runs on all columns at once; ``g`` is convex in
    ``eta`` and therefore unimodal in ``log10 eta``. Columns whose finite
    entries are all equal give uniform weights at every temperature and get
    the upper bound.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    T = S.shape[1]
    eps = np.broadcast_to(np.asarray(eps, float), (T,))
    if np.any(eps <= 0):
        raise ConfigurationError("eps must be positive")
    finite = np.isfinite(S)
    if not finite.any(axis=0).all():
        raise NumericalError("no finite cost-to-go values")
    lo, hi = bounds
    spread = np.max(np.where(finite, S, -np.inf), axis=0) - np.min(np.where(finite, S, np.inf), axis=0)

    def g(s):
        return dual_value(10.0**s, S, eps)

    a, b = np.full(T, float(lo)), np.full(T, float(hi))
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    gc, gd = g(c), g(d)
    for _ in range(iterations):
        left = gc < gd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c, new_d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
        # the surviving interior point is reused; only one new evaluation per step
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        g_new = g(np.where(left, new_c, new_d))
        gc, gd = np.where(left, g_new, gd), np.where(left, gc, g_new)
        c, d = c_next, d_next
    s = 0.5 * (a + b)
    # the bracket endpoints themselves are candidates too
    cands = np.stack([np.full(T, float(lo)), s, np.full(T, float(hi))])
    vals = np.stack([g(x) for x in cands])
    best = cands[np.argmin(vals, axis=0), np.arange(T)]
    return np.where(spread > 0, 10.0**best, 10.0**hi)


def dual_eta(S, eps, bounds=LOG10_ETA_BOUNDS) -> float:
    """Temperature for a single vector of cost-to-go values; see :func:`dual_etas`."""
    return float(dual_etas(np.asarray(S, float)[:, None], eps, bounds)[0])


def pi2_weights(S, eta) -> np.ndarray:
    """``softmax(-S / eta)`` over samples; non-finite ``S`` gets weight zero."""
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    S = np.asarray(S, dtype=float)
    finite = np.isfinite(S)
    if not finite.any():
        raise NumericalError("no finite cost-to-go values")
    shifted = np.where(finite, S - S[finite].min(), np.inf)
    with np.errstate(over="ignore"):
        e = np.exp(-shifted / eta)
    return e / e.sum()


def kl_from_uniform(w) -> float:
    w = np.asarray(w, dtype=float)
    nz = w > 0
    return float(np.sum(w[nz] * np.log(w[nz] * w.size)))


def compute_weights(S, eps, bounds=LOG10_ETA_BOUNDS) -> Pi2Weights:
    """Optimize ``eta_t`` and compute weights for every column of ``S``."""
    N, T = S.shape
    eps = np.broadcast_to(np.asarray(eps, float), (T,)).copy()
    eta = dual_etas(S, eps, bounds)
    W = np.stack([pi2_weights(S[:, t], eta[t]) for t in range(T)], axis=1)
    return Pi2Weights(W, eta, eps)


def weighted_ml_update(states, controls, weights, prev: TvlgPolicy, config: Pi2Config = Pi2Config()):
    """Refit a linear-Gaussian policy to weighted ``(state, control)`` samples.

    ``states`` is ``(N, T, dX)``, ``controls`` ``(N, T, dU)`` and ``weights``
    ``(N, T)`` with columns summing to one. The gains are fitted by weighted
    ridge regression whose penalty pulls ``K_t`` towards ``prev.K[t]`` (so
    gains that the samples cannot identify stay where they were); with
    ``config.fit_gains=False`` only ``k_t`` is refitted. The new covariance
    blends ``prev.Sigma[t]`` with the weighted residual covariance using
    ``config.covariance_damping``; when the weights' effective sample size is
    below ``config.min_ess`` the previous covariance is kept.
    """
    X = np.asarray(states, dtype=float)
    U = np.asarray(controls, dtype=float)
    W = np.asarray(weights, dtype=float)
    N, T, dX = X.shape
    if N < 2:
        raise ConfigurationError("weighted ML update needs at least two samples")
    if not np.allclose(W.sum(axis=0), 1.0, atol=1e-9) or np.any(W < 0):
        raise ConfigurationError("weights must be nonnegative and sum to one per timestep")
    dU = U.shape[2]
    K = np.array(prev.K)
    k = np.zeros((T, dU))
    Sigma = np.zeros((T, dU, dU))
    degenerate = []
    for t in range(T):
        w = W[:, t]
        x, u = X[:, t], U[:, t]
        x_mean = w @ x
        xc = x - x_mean
        if config.fit_gains:
            du = u - x @ prev.K[t].T
            du_mean = w @ du
            A = (xc * w[:, None]).T @ xc + config.reg * np.eye(dX)
            B = (xc * w[:, None]).T @ (du - du_mean)
            K[t] = prev.K[t] + np.linalg.solve(A, B).T
        k[t] = w @ u - K[t] @ x_mean
        r = u - x @ K[t].T - k[t]
        ess = 1.0 / np.sum(w**2)
        if ess < config.min_ess:
            degenerate.append(t)
            Sigma[t] = prev.Sigma[t]
            continue
        ml = symmetrize((r * w[:, None]).T @ r) + config.reg * np.eye(dU)
        d = config.covariance_damping
        Sigma[t] = (1.0 - d) * prev.Sigma[t] + d * ml
    if degenerate:
        warnings.warn(
            f"degenerate PI2 weights at {len(degenerate)} timesteps; previous covariance kept",
            RuntimeWarning,
        )
    return TvlgPolicy(K, k, floor_covariance(Sigma, config.covariance_floor))


def pi2_update(states, controls, S, prev: TvlgPolicy, eps, config: Pi2Config = Pi2Config()):
    """Full PI2 step from cost-to-go ``S`` (``(N, T)``); returns ``(policy, weights)``."""
    weights = compute_weights(np.asarray(S, float), eps, config.log10_eta_bounds)
    return weighted_ml_update(states, controls, weights.w, prev, config), weights
