"""Per-timestep linear-Gaussian dynamics fitted by ridge regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RolloutBatch, symmetrize
from .errors import ConfigurationError, SingularityError


@dataclass(frozen=True, eq=False)
class FittedDynamics:
    """``x_{t+1} ~ N(fx_t x_t + fu_t u_t + fc_t, F_t)`` for ``t = 0..T-2``."""

    fx: np.ndarray  # (T-1, dX, dX)
    fu: np.ndarray  # (T-1, dX, dU)
    fc: np.ndarray  # (T-1, dX)
    F: np.ndarray  # (T-1, dX, dX)

    @property
    def T(self) -> int:
        """Horizon of the trajectories the model was fitted on."""
        return self.fx.shape[0] + 1

    def predict(self, x, u, t):
        return np.asarray(x) @ self.fx[t].T + np.asarray(u) @ self.fu[t].T + self.fc[t]


def fit_dynamics(batch: RolloutBatch, reg: float = 1e-6) -> FittedDynamics:
    """Regress ``x_{t+1}`` on ``[x_t; u_t; 1]`` separately for every timestep.

    The ridge penalty ``reg`` applies to the state and action coefficients but
    not to the constant; ``F_t`` is the residual covariance plus ``reg * I``.
    """
    if batch.N < 2:
        raise ConfigurationError("fitting dynamics needs at least two rollouts")
    if reg < 0:
        raise ConfigurationError("reg must be nonnegative")
    N, T, dX, dU = batch.N, batch.T, batch.dX, batch.dU
    fx = np.zeros((T - 1, dX, dX))
    fu = np.zeros((T - 1, dX, dU))
    fc = np.zeros((T - 1, dX))
    F = np.zeros((T - 1, dX, dX))
    dZ = dX + dU
    for t in range(T - 1):
        Z = np.concatenate([batch.X[:, t], batch.U[:, t]], axis=1)
        Y = batch.X[:, t + 1]
        # centering removes the constant column, so it is never penalized
        z_mean, y_mean = Z.mean(axis=0), Y.mean(axis=0)
        Zc, Yc = Z - z_mean, Y - y_mean
        A = Zc.T @ Zc + reg * np.eye(dZ)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise SingularityError("dynamics regression design is rank deficient", t) from None
        if reg == 0 and np.linalg.cond(A) > 1e12:
            raise SingularityError("dynamics regression design is rank deficient", t)
        W = np.linalg.solve(L.T, np.linalg.solve(L, Zc.T @ Yc)).T
        fx[t], fu[t] = W[:, :dX], W[:, dX:]
        fc[t] = y_mean - W @ z_mean
        R = Yc - Zc @ W.T
        F[t] = symmetrize(R.T @ R / max(N - 1, 1)) + reg * np.eye(dX)
    return FittedDynamics(fx, fu, fc, F)
