"""Local value functions and generalized advantage estimation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .diffkit import MlpParams, MlpTape, ShapeError, init_params


@dataclass(frozen=True)
class ValueFunction:
    net: MlpParams
    owner: int = 0

    def __post_init__(self):
        if self.net.out_dim != 1:
            raise ShapeError(f"value net must have scalar output, got {self.net.out_dim}")

    @classmethod
    def create(cls, obs_dim: int, hidden: Sequence[int], rng: np.random.Generator, owner: int = 0,
               out_scale: float = 0.0):
        # zero output layer: V starts at 0, so an agent that is never paid sees zero advantages
        return cls(init_params((obs_dim, *hidden, 1), rng, out_scale=out_scale), owner)

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    def predict(self, obs: np.ndarray) -> np.ndarray:
        single = np.ndim(obs) == 1
        v = MlpTape(self.net, obs).output[:, 0]
        return v[0] if single else v

    def with_theta(self, theta: np.ndarray) -> "ValueFunction":
        return ValueFunction(self.net.with_theta(theta), self.owner)


@dataclass(frozen=True)
class Trajectory:
    """One agent's view of an episode.

    ``final_obs`` is the observation after the last step; it is only used for
    bootstrapping when ``terminal`` is false.
    """

    observations: np.ndarray
    rewards: np.ndarray
    actions: np.ndarray | None = None
    final_obs: np.ndarray | None = None
    terminal: bool = True

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        rew = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if rew.size == 0:
            raise ShapeError("empty trajectory")
        if obs.shape[0] != rew.size:
            raise ShapeError(f"{obs.shape[0]} observations for {rew.size} rewards")
        if not self.terminal and self.final_obs is None:
            raise ShapeError("non-terminal trajectory needs final_obs for bootstrapping")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "rewards", rew)

    @property
    def length(self) -> int:
        return self.rewards.size


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE over a ``(paths, T)`` block; ``bootstrap`` is the value after the last step."""
    rewards = np.atleast_2d(rewards)
    values = np.atleast_2d(values)
    if rewards.shape != values.shape:
        raise ShapeError(f"rewards {rewards.shape} vs values {values.shape}")
    if rewards.shape[1] == 0:
        raise ShapeError("empty trajectory")
    next_values = np.concatenate([values[:, 1:], np.reshape(bootstrap, (-1, 1))], axis=1)
    deltas = rewards + gamma * next_values - values
    adv = np.empty_like(deltas)
    acc = np.zeros(deltas.shape[0])
    for t in range(deltas.shape[1] - 1, -1, -1):
        acc = deltas[:, t] + gamma * lam * acc
        adv[:, t] = acc
    return adv


def gae_advantages(traj: Trajectory, vf: ValueFunction, gamma: float, lam: float) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    values = vf.predict(traj.observations)
    boot = 0.0 if traj.terminal else float(vf.predict(np.asarray(traj.final_obs)))
    return gae(traj.rewards[None], values[None], np.array([boot]), gamma, lam)[0]


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-std copy; a constant input maps to zeros."""
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > eps else np.zeros_like(adv)


def value_loss(vf: ValueFunction, obs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((vf.predict(obs) - targets) ** 2))


def fit_value(vf: ValueFunction, obs: np.ndarray, targets: np.ndarray, epochs: int = 5,
              lr: float = 1e-2, method: str = "gd") -> ValueFunction:
    """Full-batch minimisation of mean squared error, keeping the best iterate.

    ``method="gd"`` takes ``epochs`` plain gradient steps of size ``lr``;
    ``method="lbfgs"`` runs ``epochs`` L-BFGS iterations instead (``lr`` unused).
    The returned loss is never above the starting loss.
    """
    if method == "lbfgs":
        return _fit_lbfgs(vf, obs, targets, epochs)
    if method != "gd":
        raise ValueError(f"unknown value-fit method {method!r}")
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    theta = vf.net.theta.copy()
    best_theta, best_loss = theta.copy(), None
    for _ in range(epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            tape = MlpTape(vf.net.with_theta(theta), obs)
            resid = tape.output[:, 0] - targets
            loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            break
        if best_loss is None or loss < best_loss:
            best_theta, best_loss = theta.copy(), loss
        grad = tape.vjp((2.0 / resid.size) * resid[:, None])
        theta = theta - lr * grad
    return vf.with_theta(best_theta)


def _fit_lbfgs(vf: ValueFunction, obs: np.ndarray, targets: np.ndarray, iters: int) -> ValueFunction:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    best = {"loss": value_loss(vf, obs, targets), "theta": vf.net.theta.copy()}

    def loss_and_grad(theta):
        with np.errstate(over="ignore", invalid="ignore"):
            tape = MlpTape(vf.net.with_theta(theta), obs)
            resid = tape.output[:, 0] - targets
            loss = float(np.mean(resid ** 2))
            grad = tape.vjp((2.0 / resid.size) * resid[:, None])
        if not np.isfinite(loss):
            return np.inf, np.zeros_like(theta)
        if loss < best["loss"]:
            best["loss"], best["theta"] = loss, theta.copy()
        return loss, grad

    minimize(loss_and_grad, vf.net.theta.copy(), jac=True, method="L-BFGS-B", options={"maxiter": iters})
    return vf.with_theta(best["theta"])
