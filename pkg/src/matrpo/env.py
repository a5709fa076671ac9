"""Environments: modified Cooperative Navigation and a one-shot matrix game.

Both step a batch of ``n_envs`` independent copies at once; observations come
back as ``(n_envs, n_agents, obs_dim)`` and rewards as ``(n_envs, n_agents)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# left, right, up, down, stay
ACTION_FORCES = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 0.0]])
N_ACTIONS = len(ACTION_FORCES)


class EpisodeDoneError(RuntimeError):
    pass


@dataclass
class NavigationConfig:
    n_agents: int = 3
    horizon: int = 100
    dt: float = 0.1
    damping: float = 0.25
    force: float = 1.0
    agent_radius: float = 0.15
    arena: float = 1.0  # half-width of the square arena


class ParticleWorld:
    """Cooperative Navigation with a single rewarded agent.

    Agent 0 receives minus the sum over landmarks of the closest agent's
    distance; every agent pays -1 per agent it overlaps with.
    """

    def __init__(self, config: NavigationConfig | None = None, n_envs: int = 1):
        self.config = config or NavigationConfig()
        if self.config.n_agents < 1:
            raise ValueError("need at least one agent")
        self.n_envs = n_envs
        self.n_agents = self.config.n_agents
        self.t = 0
        self.pos = self.vel = self.landmarks = None

    @property
    def obs_dims(self) -> list[int]:
        n = self.n_agents
        return [4 + 2 * (n - 1) + 2 * n] * n

    @property
    def action_sizes(self) -> list[int]:
        return [N_ACTIONS] * self.n_agents

    @property
    def horizon(self) -> int:
        return self.config.horizon

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        c, B, N = self.config, self.n_envs, self.n_agents
        self.pos = rng.uniform(-c.arena, c.arena, size=(B, N, 2))
        self.landmarks = rng.uniform(-c.arena, c.arena, size=(B, N, 2))
        self.vel = np.zeros((B, N, 2))
        self.t = 0
        return self.observe()

    def set_state(self, pos, vel, landmarks) -> np.ndarray:
        self.pos = np.array(pos, dtype=np.float64).reshape(self.n_envs, self.n_agents, 2)
        self.vel = np.array(vel, dtype=np.float64).reshape(self.n_envs, self.n_agents, 2)
        self.landmarks = np.array(landmarks, dtype=np.float64).reshape(self.n_envs, self.n_agents, 2)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        B, N = self.n_envs, self.n_agents
        rel_agents = self.pos[:, None, :, :] - self.pos[:, :, None, :]  # [b, i, j] = p_j - p_i
        rel_marks = self.landmarks[:, None, :, :] - self.pos[:, :, None, :]
        others = ~np.eye(N, dtype=bool)
        rel_agents = rel_agents[:, others].reshape(B, N, 2 * (N - 1))
        return np.concatenate(
            [self.pos, self.vel, rel_agents, rel_marks.reshape(B, N, 2 * N)], axis=2
        )

    def collisions(self) -> np.ndarray:
        """``(n_envs, n_agents)`` count of other agents each agent overlaps."""
        d = np.linalg.norm(self.pos[:, :, None, :] - self.pos[:, None, :, :], axis=-1)
        hit = d < 2 * self.config.agent_radius
        hit[:, np.arange(self.n_agents), np.arange(self.n_agents)] = False
        return hit.sum(axis=2)

    def rewards(self) -> np.ndarray:
        d = np.linalg.norm(self.pos[:, :, None, :] - self.landmarks[:, None, :, :], axis=-1)
        r = -self.collisions().astype(np.float64)
        r[:, 0] -= d.min(axis=1).sum(axis=1)
        return r

    def step(self, actions: np.ndarray):
        if self.pos is None:
            raise EpisodeDoneError("reset() must be called before step()")
        if self.t >= self.config.horizon:
            raise EpisodeDoneError(f"episode finished after {self.config.horizon} steps")
        c = self.config
        actions = np.asarray(actions).reshape(self.n_envs, self.n_agents)
        if actions.min() < 0 or actions.max() >= N_ACTIONS:
            raise ValueError(f"actions must lie in [0, {N_ACTIONS})")
        force = c.force * ACTION_FORCES[actions]
        self.vel = (1.0 - c.damping) * self.vel + force * c.dt
        self.pos = self.pos + self.vel * c.dt
        self.t += 1
        return self.observe(), self.rewards(), self.t >= c.horizon


@dataclass
class MatrixGame:
    """Single-state, horizon-1 game; ``payoffs[i]`` is agent i's reward tensor."""

    payoffs: np.ndarray
    n_envs: int = 1

    def __post_init__(self):
        self.payoffs = np.asarray(self.payoffs, dtype=np.float64)
        n = self.payoffs.shape[0]
        if self.payoffs.ndim != n + 1:
            raise ValueError(f"payoff tensor shape {self.payoffs.shape} does not match {n} agents")
        self.n_agents = n
        self.t = 0

    @classmethod
    def random(cls, n_agents: int, n_actions: int, rng: np.random.Generator, n_envs: int = 1):
        return cls(rng.uniform(0.0, 1.0, size=(n_agents,) + (n_actions,) * n_agents), n_envs)

    @property
    def obs_dims(self) -> list[int]:
        return [1] * self.n_agents

    @property
    def action_sizes(self) -> list[int]:
        return list(self.payoffs.shape[1:])

    @property
    def horizon(self) -> int:
        return 1

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.t = 0
        return np.ones((self.n_envs, self.n_agents, 1))

    def step(self, actions: np.ndarray):
        if self.t >= 1:
            raise EpisodeDoneError("matrix game lasts a single step")
        actions = np.asarray(actions).reshape(self.n_envs, self.n_agents)
        idx = tuple(actions[:, i] for i in range(self.n_agents))
        rewards = np.stack([self.payoffs[i][idx] for i in range(self.n_agents)], axis=1)
        self.t = 1
        return np.ones((self.n_envs, self.n_agents, 1)), rewards, True

    def joint_reward(self) -> np.ndarray:
        return self.payoffs.sum(axis=0)


def _joint_prob(tables: Sequence[np.ndarray], joint: tuple[int, ...]) -> float:
    return float(np.prod([tables[n][a] for n, a in enumerate(joint)]))


def matrix_game_exact_surrogate(game: MatrixGame, old: Sequence[Sequence[np.ndarray]],
                                new: Sequence[Sequence[np.ndarray]]) -> tuple[float, float]:
    """Centralized and summed-local surrogates by enumerating every joint action.

    ``old[i][n]`` / ``new[i][n]`` are agent i's head-n probability tables. The
    behaviour policy has every agent acting from its own head, and advantages
    are ``r^i(a) - E_old[r^i]``.
    """
    N = game.n_agents
    sizes = game.action_sizes
    joints = list(itertools.product(*[range(k) for k in sizes]))
    own_old = [old[i][i] for i in range(N)]
    own_new = [new[i][i] for i in range(N)]
    p_old = np.array([_joint_prob(own_old, a) for a in joints])
    r = np.array([[game.payoffs[i][a] for a in joints] for i in range(N)])
    adv = r - (r @ p_old)[:, None]
    ratio = np.array([_joint_prob(own_new, a) for a in joints]) / p_old
    centralized = float(np.sum(p_old * ratio * adv.sum(axis=0)))
    local = 0.0
    for i in range(N):
        ratio_i = np.array([_joint_prob(new[i], a) / _joint_prob(old[i], a) for a in joints])
        local += float(np.sum(p_old * ratio_i * adv[i]))
    return centralized, local
