"""Self-contained simulated environments with analytic cost derivatives.

Every environment steps a whole stack of states at once: ``step(x, u, t)``
and ``cost(x, u, t)`` accept ``(N, dX)`` / ``(N, dU)`` arrays (or single
vectors). ``cost_derivatives`` works on a single point and returns the
exact gradient and Hessian blocks used by the quadratic cost expansion.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

GAMMA = 1e-5
DT = 0.05
HORIZON = 100


def generic_loss(z, alpha, beta, gamma=GAMMA):
    """``0.5 * alpha * |z|^2 + beta * sqrt(gamma + |z|^2)`` with its gradient and Hessian."""
    if gamma <= 0:
        raise ConfigurationError("gamma must be positive")
    z = np.asarray(z, dtype=float)
    sq = z @ z
    root = np.sqrt(gamma + sq)
    value = 0.5 * alpha * sq + beta * root
    grad = alpha * z + beta * z / root
    eye = np.eye(z.size)
    hess = alpha * eye + beta * (eye / root - np.outer(z, z) / root**3)
    return value, grad, hess


def generic_loss_value(z, alpha, beta, gamma=GAMMA):
    """Vectorized value of :func:`generic_loss` over the last axis of ``z``."""
    sq = np.sum(np.square(z), axis=-1)
    return 0.5 * alpha * sq + beta * np.sqrt(gamma + sq)


@dataclass(frozen=True)
class GenericLoss:
    alpha: float
    beta: float
    gamma: float = GAMMA
    target: tuple = ()

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")

    def __call__(self, v):
        z = np.asarray(v, float) - (np.asarray(self.target, float) if self.target else 0.0)
        return generic_loss(z, self.alpha, self.beta, self.gamma)


class Environment:
    """Interface shared by all environments.

    Subclasses set ``dim_x``, ``dim_u``, ``horizon``, ``dt`` and implement
    :meth:`initial_state`, :meth:`step`, :meth:`cost` and
    :meth:`cost_derivatives`.
    """

    name = "base"
    dim_x: int
    dim_u: int
    horizon: int = HORIZON
    dt: float = DT
    noise_scale: float = 0.0
    x0_noise: float = 0.0
    nonnegative_costs = True

    def initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, x, u, t):
        raise NotImplementedError

    def cost(self, x, u, t):
        raise NotImplementedError

    def cost_derivatives(self, x, u, t):
        """Return ``(l, l_x, l_u, l_xx, l_uu, l_xu)`` at a single point."""
        raise NotImplementedError


def _per_step(mats, T, name):
    mats = np.asarray(mats, dtype=float)
    if mats.ndim == 2:
        mats = np.broadcast_to(mats, (T, *mats.shape))
    if mats.ndim != 3 or mats.shape[0] != T:
        raise ConfigurationError(f"{name} must be a matrix or a stack of {T} matrices")
    return np.array(mats)


class LQEnv(Environment):
    """``x' = A_t x + B_t u + w`` with cost ``0.5 x'Q_t x + 0.5 u'R_t u``."""

    name = "lq"
    nonnegative_costs = True

    def __init__(self, A, B, Q, R, noise_scale=0.0, x0=None, x0_noise=0.0, horizon=None):
        A, B, Q, R = (np.asarray(m, float) for m in (A, B, Q, R))
        T = horizon if horizon is not None else (A.shape[0] if A.ndim == 3 else HORIZON)
        self.A = _per_step(A, T, "A")
        self.B = _per_step(B, T, "B")
        self.Q = _per_step(Q, T, "Q")
        self.R = _per_step(R, T, "R")
        self.horizon = T
        self.dim_x = self.A.shape[1]
        self.dim_u = self.B.shape[2]
        if self.A.shape[1:] != (self.dim_x, self.dim_x) or self.B.shape[1] != self.dim_x:
            raise ConfigurationError("A and B dimensions are inconsistent")
        if self.Q.shape[1:] != (self.dim_x, self.dim_x) or self.R.shape[1:] != (self.dim_u, self.dim_u):
            raise ConfigurationError("Q and R dimensions are inconsistent")
        for t in range(T):
            if np.linalg.eigvalsh(0.5 * (self.R[t] + self.R[t].T)).min() <= 0:
                raise ConfigurationError(f"R is not positive definite at timestep {t}")
            if np.linalg.eigvalsh(0.5 * (self.Q[t] + self.Q[t].T)).min() < -1e-12:
                raise ConfigurationError(f"Q is not positive semidefinite at timestep {t}")
        self.noise_scale = float(noise_scale)
        self.x0 = np.zeros(self.dim_x) if x0 is None else np.asarray(x0, float)
        self.x0_noise = float(x0_noise)

    def initial_state(self):
        return self.x0.copy()

    def step(self, x, u, t):
        return np.asarray(x) @ self.A[t].T + np.asarray(u) @ self.B[t].T

    def cost(self, x, u, t):
        x, u = np.asarray(x), np.asarray(u)
        return 0.5 * (
            np.einsum("...i,ij,...j->...", x, self.Q[t], x)
            + np.einsum("...i,ij,...j->...", u, self.R[t], u)
        )

    def cost_derivatives(self, x, u, t):
        Q, R = self.Q[t], self.R[t]
        return (
            float(self.cost(x, u, t)),
            Q @ x,
            R @ u,
            Q.copy(),
            R.copy(),
            np.zeros((self.dim_x, self.dim_u)),
        )


def make_lq_env(A_t, B_t, Q_t, R_t, noise_scale=0.0, **kwargs) -> LQEnv:
    return LQEnv(A_t, B_t, Q_t, R_t, noise_scale=noise_scale, **kwargs)


class ReacherEnv(Environment):
    """Torque-controlled two-link planar arm in a horizontal plane.

    State ``(q1, q2, dq1, dq2, target_x, target_y)``; the target is carried in
    the state (constant dynamics) so a single global policy can see it.
    Point masses sit at the link tips; integration is semi-implicit Euler.
    """

    name = "reacher"

    def __init__(
        self,
        q0=(0.0, 0.0),
        target=(1.0, 1.0),
        link_lengths=(1.0, 1.0),
        masses=(1.0, 1.0),
        damping=0.5,
        torque_weight=1e-4,
        dt=DT,
        horizon=HORIZON,
        noise_scale=0.0,
        x0_noise=0.0,
    ):
        self.dim_x, self.dim_u = 6, 2
        self.q0 = np.asarray(q0, float)
        self.target = np.asarray(target, float)
        self.l1, self.l2 = map(float, link_lengths)
        self.m1, self.m2 = map(float, masses)
        self.damping = float(damping)
        self.torque_weight = float(torque_weight)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.noise_scale = float(noise_scale)
        self.x0_noise = float(x0_noise)

    def initial_state(self):
        return np.concatenate([self.q0, np.zeros(2), self.target])

    def end_effector(self, q):
        q = np.asarray(q, float)
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        return np.stack(
            [
                self.l1 * np.cos(q1) + self.l2 * np.cos(q12),
                self.l1 * np.sin(q1) + self.l2 * np.sin(q12),
            ],
            axis=-1,
        )

    def accelerations(self, q, dq, tau):
        l1, l2, m1, m2 = self.l1, self.l2, self.m1, self.m2
        c2, s2 = np.cos(q[..., 1]), np.sin(q[..., 1])
        M11 = (m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2 * c2
        M12 = m2 * l2**2 + m2 * l1 * l2 * c2
        M22 = np.full_like(M11, m2 * l2**2)
        h = m2 * l1 * l2 * s2
        dq1, dq2 = dq[..., 0], dq[..., 1]
        r1 = tau[..., 0] + h * (2 * dq1 * dq2 + dq2**2) - self.damping * dq1
        r2 = tau[..., 1] - h * dq1**2 - self.damping * dq2
        det = M11 * M22 - M12**2
        return np.stack([(M22 * r1 - M12 * r2) / det, (M11 * r2 - M12 * r1) / det], axis=-1)

    def step(self, x, u, t):
        x = np.asarray(x, float)
        q, dq = x[..., 0:2], x[..., 2:4]
        dq_next = dq + self.dt * self.accelerations(q, dq, np.asarray(u, float))
        q_next = q + self.dt * dq_next
        return np.concatenate([q_next, dq_next, x[..., 4:6]], axis=-1)

    def distance(self, x):
        x = np.asarray(x, float)
        return np.linalg.norm(self.end_effector(x[..., 0:2]) - x[..., 4:6], axis=-1)

    def cost(self, x, u, t):
        x, u = np.asarray(x, float), np.asarray(u, float)
        z = self.end_effector(x[..., 0:2]) - x[..., 4:6]
        return generic_loss_value(z, 0.0, 1.0) + self.torque_weight * np.sum(u * u, axis=-1)

    def cost_derivatives(self, x, u, t):
        x, u = np.asarray(x, float), np.asarray(u, float)
        q1, q12 = x[0], x[0] + x[1]
        l1, l2 = self.l1, self.l2
        z = self.end_effector(x[0:2]) - x[4:6]
        val, g, H = generic_loss(z, 0.0, 1.0)

        J = np.zeros((2, 6))
        J[:, 0] = [-l1 * np.sin(q1) - l2 * np.sin(q12), l1 * np.cos(q1) + l2 * np.cos(q12)]
        J[:, 1] = [-l2 * np.sin(q12), l2 * np.cos(q12)]
        J[:, 4:6] = -np.eye(2)
        # second derivatives of each end-effector coordinate in (q1, q2)
        a = np.array([-l1 * np.cos(q1) - l2 * np.cos(q12), -l1 * np.sin(q1) - l2 * np.sin(q12)])
        b = np.array([-l2 * np.cos(q12), -l2 * np.sin(q12)])
        curv = np.zeros((6, 6))
        curv[0, 0] = g @ a
        curv[0, 1] = curv[1, 0] = curv[1, 1] = g @ b

        lxx = J.T @ H @ J + curv
        w = self.torque_weight
        return (
            float(val + w * u @ u),
            J.T @ g,
            2 * w * u,
            lxx,
            2 * w * np.eye(2),
            np.zeros((6, 2)),
        )


def make_reacher_env(condition=None, **kwargs) -> ReacherEnv:
    """Reacher for a condition mapping with optional keys ``q0`` and ``target``."""
    condition = dict(condition or {})
    condition.pop("env", None)
    condition.pop("id", None)
    return ReacherEnv(**condition, **kwargs)


class PusherEnv(Environment):
    """Point gripper pushing a block towards a goal in the plane.

    State ``(gx, gy, gvx, gvy, bx, by)``; the action is a force on the
    gripper (a damped double integrator). The block is quasi-static: it only
    moves while the gripper penetrates it, driven by a penalty impulse
    ``stiffness * penetration * dt`` along the contact normal, which is
    also removed from the gripper's momentum. Without contact the block does
    not move, so the dynamics switch abruptly at first touch.
    """

    name = "pusher"

    def __init__(
        self,
        block=(1.0, 0.0),
        goal=(2.0, 0.0),
        gripper=(0.0, 0.0),
        radius=0.2,
        stiffness=1000.0,
        gripper_mass=1.0,
        block_mass=1.0,
        damping=1.0,
        torque_weight=0.0,
        weights=(4.0, 1.0),
        dt=DT,
        horizon=HORIZON,
        noise_scale=0.0,
        x0_noise=0.0,
    ):
        self.dim_x, self.dim_u = 6, 2
        self.block0 = np.asarray(block, float)
        self.goal = np.asarray(goal, float)
        self.gripper0 = np.asarray(gripper, float)
        self.radius = float(radius)
        self.stiffness = float(stiffness)
        self.gripper_mass = float(gripper_mass)
        self.block_mass = float(block_mass)
        self.damping = float(damping)
        self.torque_weight = float(torque_weight)
        self.weights = tuple(map(float, weights))
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.noise_scale = float(noise_scale)
        self.x0_noise = float(x0_noise)

    def initial_state(self):
        return np.concatenate([self.gripper0, np.zeros(2), self.block0])

    def contact_impulse(self, gripper, block):
        """Impulse vector applied to the block (zero when not touching)."""
        d = block - gripper
        dist = np.linalg.norm(d, axis=-1, keepdims=True)
        pen = self.radius - dist
        touching = (pen > 0) & (dist > 1e-12)
        n = np.divide(d, dist, out=np.zeros_like(d), where=dist > 1e-12)
        return np.where(touching, self.stiffness * pen * self.dt * n, 0.0)

    def step(self, x, u, t):
        x, u = np.asarray(x, float), np.asarray(u, float)
        dt = self.dt
        g, v, b = x[..., 0:2], x[..., 2:4], x[..., 4:6]
        v = v + dt * (u / self.gripper_mass - self.damping * v)
        g = g + dt * v
        J = self.contact_impulse(g, b)
        b = b + dt * J / self.block_mass
        v = v - J / self.gripper_mass
        return np.concatenate([g, v, b], axis=-1)

    def block_distance(self, x):
        return np.linalg.norm(np.asarray(x)[..., 4:6] - self.goal, axis=-1)

    def cost(self, x, u, t):
        x, u = np.asarray(x, float), np.asarray(u, float)
        wb, wg = self.weights
        c = wb * generic_loss_value(x[..., 4:6] - self.goal, 10.0, 0.1)
        c = c + wg * generic_loss_value(x[..., 0:2] - x[..., 4:6], 10.0, 0.1)
        return c + self.torque_weight * np.sum(u * u, axis=-1)

    def cost_derivatives(self, x, u, t):
        x, u = np.asarray(x, float), np.asarray(u, float)
        wb, wg = self.weights
        vb, gb, Hb = generic_loss(x[4:6] - self.goal, 10.0, 0.1)
        vg, gg, Hg = generic_loss(x[0:2] - x[4:6], 10.0, 0.1)
        # gripper-block term depends on (g - b)
        Jg = np.zeros((2, 6))
        Jg[:, 0:2] = np.eye(2)
        Jg[:, 4:6] = -np.eye(2)
        Jb = np.zeros((2, 6))
        Jb[:, 4:6] = np.eye(2)
        w = self.torque_weight
        lx = wb * Jb.T @ gb + wg * Jg.T @ gg
        lxx = wb * Jb.T @ Hb @ Jb + wg * Jg.T @ Hg @ Jg
        return (
            float(wb * vb + wg * vg + w * u @ u),
            lx,
            2 * w * u,
            lxx,
            2 * w * np.eye(2),
            np.zeros((6, 2)),
        )


def make_pusher_env(condition=None, **kwargs) -> PusherEnv:
    """Pusher for a condition mapping with optional ``block``, ``goal``, ``gripper``."""
    condition = dict(condition or {})
    condition.pop("env", None)
    condition.pop("id", None)
    return PusherEnv(**condition, **kwargs)


ENV_FACTORIES = {
    "reacher": make_reacher_env,
    "pusher": make_pusher_env,
}


def make_env(name, condition=None, **kwargs) -> Environment:
    if name == "lq":
        c = dict(condition or {})
        c.pop("env", None)
        c.pop("id", None)
        c.update(kwargs)
        return make_lq_env(c.pop("A"), c.pop("B"), c.pop("Q"), c.pop("R"), **c)
    try:
        factory = ENV_FACTORIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}") from None
    return factory(condition, **kwargs)


def load_condition(path) -> dict:
    """Read a condition file: a JSON object of initial states, targets and weights."""
    with open(path) as f:
        cond = json.load(f)
    if not isinstance(cond, dict):
        raise ConfigurationError(f"{path}: condition file must hold a JSON object")
    return cond


def write_golden_csv(path, rollout):
    """Write one trajectory as rows ``t, x0.., u0.., cost``."""
    X, U, C = rollout.states, rollout.actions, rollout.step_costs
    dX, dU = X.shape[1], U.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", *(f"x{i}" for i in range(dX)), *(f"u{i}" for i in range(dU)), "cost"])
        for t in range(X.shape[0]):
            w.writerow([t, *(repr(float(v)) for v in (*X[t], *U[t], C[t]))])


def read_golden_csv(path):
    """Return ``(states, actions, costs)`` arrays from :func:`write_golden_csv` output."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    dX = sum(h.startswith("x") for h in header)
    dU = sum(h.startswith("u") for h in header)
    return body[:, 1 : 1 + dX], body[:, 1 + dX : 1 + dX + dU], body[:, -1]

