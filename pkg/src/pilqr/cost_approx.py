"""Quadratic expansion of the true cost and the residual it leaves behind."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RolloutBatch, floor_covariance, symmetrize
from .errors import NumericalError

UU_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class QuadCostApprox:
    """Per-timestep second-order expansion about ``(x_bar_t, u_bar_t)``.

    ``c_hat(x, u) = c0 + cx.dx + cu.du + 0.5 dx'cxx dx + 0.5 du'cuu du + dx'cxu du``
    with ``dx = x - x_bar``, ``du = u - u_bar``.
    """

    c0: np.ndarray
    cx: np.ndarray
    cu: np.ndarray
    cxx: np.ndarray
    cuu: np.ndarray
    cxu: np.ndarray
    x_bar: np.ndarray
    u_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.c0.shape[0]

    def evaluate(self, x, u, t):
        """``c_hat`` at time ``t`` for one point or a stack of points."""
        dx = np.asarray(x) - self.x_bar[t]
        du = np.asarray(u) - self.u_bar[t]
        return (
            self.c0[t]
            + dx @ self.cx[t]
            + du @ self.cu[t]
            + 0.5 * np.einsum("...i,ij,...j->...", dx, self.cxx[t], dx)
            + 0.5 * np.einsum("...i,ij,...j->...", du, self.cuu[t], du)
            + np.einsum("...i,ij,...j->...", dx, self.cxu[t], du)
        )

    def absolute(self, t):
        """The same quadratic written in absolute coordinates ``z = [x; u]``.

        Returns ``(H, g, const)`` with ``c_hat = 0.5 z'Hz + g'z + const``.
        """
        H = np.block([[self.cxx[t], self.cxu[t]], [self.cxu[t].T, self.cuu[t]]])
        zb = np.concatenate([self.x_bar[t], self.u_bar[t]])
        g0 = np.concatenate([self.cx[t], self.cu[t]])
        g = g0 - H @ zb
        const = self.c0[t] - g0 @ zb + 0.5 * zb @ H @ zb
        return H, g, const


def expand_cost(env, batch: RolloutBatch, uu_floor: float = UU_FLOOR, convexify: bool = True) -> QuadCostApprox:
    """Expand ``env``'s cost about the batch mean state and action at each step.

    ``cuu`` is projected to be positive definite by clamping its eigenvalues
    at ``uu_floor``. With ``convexify`` the joint ``[x; u]`` Hessian is first
    clamped to be positive semidefinite, which keeps every ``Quu`` of the
    backward pass positive definite for nonconvex costs.
    """
    T, dX, dU = batch.T, batch.dX, batch.dU
    x_bar = batch.X.mean(axis=0)
    u_bar = batch.U.mean(axis=0)
    c0 = np.zeros(T)
    cx, cu = np.zeros((T, dX)), np.zeros((T, dU))
    cxx, cuu, cxu = np.zeros((T, dX, dX)), np.zeros((T, dU, dU)), np.zeros((T, dX, dU))
    for t in range(T):
        l, lx, lu, lxx, luu, lxu = env.cost_derivatives(x_bar[t], u_bar[t], t)
        if not all(np.all(np.isfinite(a)) for a in (l, lx, lu, lxx, luu, lxu)):
            raise NumericalError("non-finite cost derivatives", t)
        if convexify:
            H = floor_covariance(np.block([[lxx, lxu], [lxu.T, luu]]), 0.0)
            lxx, luu, lxu = H[:dX, :dX], H[dX:, dX:], H[:dX, dX:]
        c0[t], cx[t], cu[t], cxu[t] = l, lx, lu, lxu
        cxx[t] = symmetrize(lxx)
        cuu[t] = floor_covariance(luu, uu_floor)
    return QuadCostApprox(c0, cx, cu, cxx, cuu, cxu, x_bar, u_bar)


def approx_costs(batch: RolloutBatch, approx: QuadCostApprox) -> np.ndarray:
    """``c_hat`` at every sampled ``(x_{i,t}, u_{i,t})``, shape ``(N, T)``."""
    return np.stack([approx.evaluate(batch.X[:, t], batch.U[:, t], t) for t in range(batch.T)], axis=1)


def residual_costs(env, batch: RolloutBatch, approx: QuadCostApprox) -> np.ndarray:
    """``c - c_hat`` at every sampled point, shape ``(N, T)``."""
    c = np.stack([env.cost(batch.X[:, t], batch.U[:, t], t) for t in range(batch.T)], axis=1)
    return c - approx_costs(batch, approx)
