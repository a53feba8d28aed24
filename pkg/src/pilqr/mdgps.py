"""Mirror-descent guided policy search around PILQR.

Local TVLG policies (one per condition) are updated with KL constraints
measured against a local linearization of the global policy, then the global
policy is fitted to the local policies' mean actions by precision-weighted
regression. The global policy is either affine or a small ReLU network,
trained by full-batch gradient descent with hand-written backpropagation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import TvlgPolicy, rng_for, sample_rollouts
from .errors import ConfigurationError, NumericalError
from .pilqr import UPDATES, AlgorithmConfig, IterationReport


class GlobalPolicy:
    """Deterministic-mean policy ``u = f_theta(x)``.

    ``hidden=()`` gives an affine map; ``hidden=(32, 32)`` two ReLU layers.
    Inputs are standardized with ``x_mean`` / ``x_scale``, which are fixed on
    the first call to :func:`fit_global` and stored in the checkpoint.
    """

    def __init__(self, dim_x, dim_u, hidden=(), theta=None, x_mean=None, x_scale=None, seed=0):
        self.dim_x, self.dim_u = int(dim_x), int(dim_u)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [self.dim_x, *self.hidden, self.dim_u]
        self.shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.x_mean = np.zeros(self.dim_x) if x_mean is None else np.asarray(x_mean, float)
        self.x_scale = np.ones(self.dim_x) if x_scale is None else np.asarray(x_scale, float)
        self.fitted = theta is not None
        if theta is None:
            theta = self._init_theta(seed)
        self.theta = np.asarray(theta, float).copy()
        if self.theta.size != self.n_params:
            raise ConfigurationError(f"theta has {self.theta.size} entries, expected {self.n_params}")

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def _init_theta(self, seed):
        g = rng_for(seed, 7)
        parts = []
        for li, (o, i) in enumerate(self.shapes):
            last = li == len(self.shapes) - 1
            scale = 0.0 if (last and not self.hidden) else np.sqrt(2.0 / i) * (0.1 if last else 1.0)
            parts += [scale * g.standard_normal((o, i)).ravel(), np.zeros(o)]
        return np.concatenate(parts)

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for o, i in self.shapes:
            W = theta[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos : pos + o]
            pos += o
            out.append((W, b))
        return out

    def _forward(self, X, theta=None):
        h = (np.atleast_2d(X) - self.x_mean) / self.x_scale
        acts = [h]
        layers = self.layers(theta)
        for li, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = z if li == len(layers) - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, X):
        X = np.asarray(X, float)
        out = self._forward(X)[0]
        return out[0] if X.ndim == 1 else out

    def jacobian(self, x):
        """``d f / d x`` at a single state, shape ``(dU, dX)``."""
        _, acts = self._forward(np.asarray(x, float))
        layers = self.layers()
        J = np.diag(1.0 / self.x_scale)
        for li, (W, _) in enumerate(layers):
            J = W @ J
            if li < len(layers) - 1:
                J = (acts[li + 1][0] > 0)[:, None] * J
        return J

    def loss_and_grad(self, X, U, precision, weights, theta=None):
        """``0.5 * sum_n w_n (f(x_n) - u_n)' Lambda_n (f(x_n) - u_n) / sum w``."""
        out, acts = self._forward(X, theta)
        diff = out - U
        Ld = np.einsum("nij,nj->ni", precision, diff)
        wsum = weights.sum()
        loss = 0.5 * np.sum(weights * np.einsum("ni,ni->n", diff, Ld)) / wsum
        delta = weights[:, None] * Ld / wsum
        layers = self.layers(theta)
        grads = []
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            h_in = acts[li]
            grads.append((delta.T @ h_in, delta.sum(axis=0)))
            if li > 0:
                delta = (delta @ W) * (acts[li] > 0)
        g = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return loss, g

    def copy(self) -> "GlobalPolicy":
        gp = GlobalPolicy(self.dim_x, self.dim_u, self.hidden, self.theta, self.x_mean, self.x_scale)
        gp.fitted = self.fitted
        return gp

    def to_dict(self) -> dict:
        return {
            "schema": "GlobalPolicy",
            "version": 1,
            "architecture": {
                "type": "mlp" if self.hidden else "affine",
                "dim_x": self.dim_x,
                "dim_u": self.dim_u,
                "hidden": list(self.hidden),
                "activation": "relu",
                "x_mean": self.x_mean.tolist(),
                "x_scale": self.x_scale.tolist(),
            },
            "fitted": self.fitted,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "GlobalPolicy":
        a = d["architecture"]
        gp = cls(a["dim_x"], a["dim_u"], a["hidden"], d["theta"], a["x_mean"], a["x_scale"])
        gp.fitted = bool(d.get("fitted", True))
        return gp

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "GlobalPolicy":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def linearize_global(gp: GlobalPolicy, states, Sigma=None, reg=1e-6):
    """Affine fit ``f(x) ~ K x + k`` around ``states`` (``(N, dX)``).

    Least squares of the policy's outputs on the states, with a ridge penalty
    pulling ``K`` towards the Jacobian at the mean state; an affine policy is
    recovered exactly and degenerate state sets fall back to the Jacobian.
    Returns ``(K, k, Sigma)`` with ``Sigma`` passed through (identity if None).
    """
    X = np.atleast_2d(np.asarray(states, float))
    Y = gp(X)
    x_mean = X.mean(axis=0)
    J = gp.jacobian(x_mean)
    Xc = X - x_mean
    R = (Y - Y.mean(axis=0)) - Xc @ J.T
    A = Xc.T @ Xc + reg * np.eye(gp.dim_x)
    K = J + np.linalg.solve(A, Xc.T @ R).T
    k = Y.mean(axis=0) - K @ x_mean
    if Sigma is None:
        Sigma = np.eye(gp.dim_u)
    return K, k, Sigma


def linearized_policy(gp: GlobalPolicy, states, Sigma) -> TvlgPolicy:
    """Per-timestep linearization over a ``(N, T, dX)`` state array."""
    T = states.shape[1]
    K = np.zeros((T, gp.dim_u, gp.dim_x))
    k = np.zeros((T, gp.dim_u))
    for t in range(T):
        K[t], k[t], _ = linearize_global(gp, states[:, t])
    return TvlgPolicy(K, k, Sigma)


@dataclass
class FitResult:
    gp: GlobalPolicy
    losses: list = field(default_factory=list)


def fit_global(gp: GlobalPolicy, X, U, precision, weights=None, epochs=300, lr=0.1) -> FitResult:
    """Precision-weighted regression of ``U`` on ``X`` by gradient descent.

    A step that would increase the loss is rejected and the step size halved;
    accepted steps grow it by 10%, so recorded losses never increase.
    Samples with zero weight contribute nothing.
    """
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    precision = np.asarray(precision, float)
    weights = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    if not np.any(weights > 0):
        raise ConfigurationError("all training weights are zero")
    gp = gp.copy()
    if not gp.fitted:
        used = X[weights > 0]
        gp.x_mean = used.mean(axis=0)
        gp.x_scale = np.where(used.std(axis=0) > 1e-8, used.std(axis=0), 1.0)
    theta = gp.theta.copy()
    loss, grad = gp.loss_and_grad(X, U, precision, weights, theta)
    losses = [loss]
    for epoch in range(epochs):
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
        for _ in range(60):
            cand = theta - lr * grad
            new_loss, new_grad = gp.loss_and_grad(X, U, precision, weights, cand)
            if np.isfinite(new_loss) and new_loss <= loss:
                theta, loss, grad = cand, new_loss, new_grad
                lr *= 1.1
                break
            lr *= 0.5
        else:
            break
        losses.append(loss)
    gp.theta = theta
    gp.fitted = True
    return FitResult(gp, losses)


@dataclass(frozen=True)
class MdgpsConfig:
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    hidden: tuple = ()
    epochs: int = 300
    lr: float = 0.1
    # use each local policy itself as KL reference until the global policy is first fitted
    local_reference_until_fitted: bool = True


def training_set(batches, policies):
    """Stack ``(state, local mean action, local precision)`` over all conditions."""
    Xs, Us, Ps = [], [], []
    for batch, pol in zip(batches, policies):
        N, T = batch.N, batch.T
        prec = np.linalg.inv(pol.Sigma)
        for t in range(T):
            Xs.append(batch.X[:, t])
            Us.append(pol.mean_action(batch.X[:, t], t))
            Ps.append(np.broadcast_to(prec[t], (N, pol.dU, pol.dU)))
    return np.concatenate(Xs), np.concatenate(Us), np.concatenate(Ps)


def mdgps_iteration(envs, local_policies, gp: GlobalPolicy, config: MdgpsConfig, seed, eps_list=None, iteration=0):
    """One MDGPS iteration over all conditions.

    Returns ``(local_policies, gp, eps_list, reports, fit_result)``.
    """
    alg = config.algorithm
    update = UPDATES[alg.algorithm]
    if eps_list is None:
        eps_list = [np.full(p.T, alg.eps_init) for p in local_policies]
    new_locals, new_eps, reports, batches = [], [], [], []
    for c, (env, local, eps) in enumerate(zip(envs, local_policies, eps_list)):
        batch = sample_rollouts(local, env, alg.n_samples, seed * 1000 + c, str(c))
        if gp.fitted or not config.local_reference_until_fitted:
            reference = linearized_policy(gp, batch.X, local.Sigma)
        else:
            reference = local
        policy, eps, info = update(env, batch, local, eps, alg, reference=reference)
        totals = batch.total_costs()
        ratio = info["ratio"]
        reports.append(
            IterationReport(
                iteration=iteration,
                episodes=batch.N,
                mean_cost=float(totals.mean()),
                std_cost=float(totals.std()),
                residual_ratio=float(np.nanmean(ratio)) if np.isfinite(ratio).any() else float("nan"),
                eps=np.asarray(eps, float),
                eta_lqr=info["lqr_state"].eta if "lqr_state" in info else np.array([]),
                eta_pi2=info["weights"].eta if "weights" in info else np.array([]),
            )
        )
        new_locals.append(policy)
        new_eps.append(eps)
        batches.append(batch)
    X, U, P = training_set(batches, new_locals)
    fit = fit_global(gp, X, U, P, epochs=config.epochs, lr=config.lr)
    return new_locals, fit.gp, new_eps, reports, fit


def rollout_global(gp: GlobalPolicy, env):
    """Run the global policy's mean from the env's initial state; returns ``(X, U, C)``."""
    T = env.horizon
    x = env.initial_state()
    X, U, C = np.zeros((T, env.dim_x)), np.zeros((T, env.dim_u)), np.zeros(T)
    for t in range(T):
        X[t] = x
        U[t] = gp(x)
        C[t] = env.cost(x, U[t], t)
        if t < T - 1:
            x = env.step(x, U[t], t)
    return X, U, C


def rollout_mean(policy: TvlgPolicy, env):
    """Noise-free rollout of a TVLG policy's mean; returns ``(X, U, C)``."""
    T = env.horizon
    x = env.initial_state()
    X, U, C = np.zeros((T, env.dim_x)), np.zeros((T, env.dim_u)), np.zeros(T)
    for t in range(T):
        X[t] = x
        U[t] = policy.mean_action(x, t)
        C[t] = env.cost(x, U[t], t)
        if t < T - 1:
            x = env.step(x, U[t], t)
    return X, U, C
