"""Outer training loops: MATRPO, centralized TRPO and independent TRPO.

All three share one machinery. A *learner* owns a factored policy and a value
function, reads some agents' observations, sums some agents' rewards, models
some agents' actions with its heads and samples actions for a subset of them:

* MATRPO: learner ``i`` reads ``o^i``, is paid ``r^i``, has one head per agent,
  acts for agent ``i``; the learners are coupled by consensus ADMM.
* centralized: a single learner reads every observation, is paid the sum of
  rewards and acts for everybody.
* independent: learner ``i`` reads ``o^i``, is paid ``r^i`` and models only its
  own action.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import valuefn
from .config import RunConfig, parse_config
from .consensus import (CGSettings, ConsensusResult, kl_backstop, policy_subproblem, run_consensus,
                        theta_update)
from .env import MatrixGame, NavigationConfig, ParticleWorld
from .diffkit import ShapeError, params_from_bytes, params_to_bytes
from .graph import CommGraph, build_ring, from_edges, isolated
from .policy import FactoredPolicy, SampleBatch, inverse_cdf, mean_kl
from .valuefn import ValueFunction

log = logging.getLogger(__name__)

STREAMS = ("env", "actions", "policy-init", "value-init", "admm-schedule", "eval", "eval-actions")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent sub-stream of a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))))


def generator_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


@dataclass(frozen=True)
class Learner:
    policy: FactoredPolicy
    value: ValueFunction
    obs_agents: tuple[int, ...]
    reward_agents: tuple[int, ...]
    head_agents: tuple[int, ...]
    acts_for: tuple[int, ...]
    radius: float


def make_env(config: RunConfig, n_envs: int):
    if config.environment == "matrix":
        rng = np.random.default_rng(config.payoff_seed)
        return MatrixGame.random(config.n_agents, config.n_actions, rng, n_envs=n_envs)
    nav = NavigationConfig(config.n_agents, config.horizon, config.dt, config.damping, config.force,
                           config.agent_radius, config.arena)
    return ParticleWorld(nav, n_envs=n_envs)


def make_graph(config: RunConfig) -> CommGraph:
    if config.n_agents == 1:
        return isolated(1)
    if config.topology == "ring":
        return build_ring(config.n_agents)
    return from_edges(config.n_agents, config.edges, config.psi or None)


def make_learners(config: RunConfig, seed: int | None = None) -> list[Learner]:
    env = make_env(config, 1)
    N = config.n_agents
    seed = config.seed if seed is None else seed
    obs_dims, act_sizes = env.obs_dims, env.action_sizes
    everyone = tuple(range(N))
    if config.algorithm == "centralized":
        specs = [(everyone, everyone, everyone, everyone, N * config.step_size)]
    elif config.algorithm == "matrpo":
        specs = [((i,), (i,), everyone, (i,), config.step_size) for i in range(N)]
    else:
        specs = [((i,), (i,), (i,), (i,), config.step_size) for i in range(N)]
    pol_rng, val_rng = stream(seed, "policy-init"), stream(seed, "value-init")
    learners = []
    for obs_agents, rew_agents, heads, acts, radius in specs:
        obs_dim = sum(obs_dims[a] for a in obs_agents)
        policy = FactoredPolicy.create(obs_dim, [act_sizes[a] for a in heads], config.policy_hidden, pol_rng,
                                       out_scale=config.policy_out_scale)
        value = ValueFunction.create(obs_dim, config.value_hidden, val_rng, owner=obs_agents[0])
        learners.append(Learner(policy, value, obs_agents, rew_agents, heads, acts, radius))
    return learners


@dataclass
class RolloutSet:
    """Joint rollouts of ``P`` paths of length ``T``; sample ``m = p * T + t``."""

    obs: np.ndarray  # (P, T, N, obs_dim)
    actions: np.ndarray  # (P, T, N)
    rewards: np.ndarray  # (P, T, N)
    collisions: np.ndarray | None = None  # (P, N) per-path collision counts
    final_obs: np.ndarray | None = None  # (P, N, obs_dim) observation after the last step
    truncated: bool = False  # paths were cut by a time limit rather than ending

    @property
    def n_paths(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    def learner_obs(self, learner: Learner) -> np.ndarray:
        P, T = self.n_paths, self.horizon
        return self.obs[:, :, list(learner.obs_agents), :].reshape(P * T, -1)

    def batch_for(self, learner: Learner) -> SampleBatch:
        P, T = self.n_paths, self.horizon
        actions = self.actions[:, :, list(learner.head_agents)].reshape(P * T, -1)
        return SampleBatch(self.learner_obs(learner), actions, np.repeat(np.arange(P), T), np.tile(np.arange(T), P))

    def learner_final_obs(self, learner: Learner) -> np.ndarray:
        return self.final_obs[:, list(learner.obs_agents), :].reshape(self.n_paths, -1)

    def learner_rewards(self, learner: Learner) -> np.ndarray:
        return self.rewards[:, :, list(learner.reward_agents)].sum(axis=2)

    def discounted_returns(self, gamma: float) -> np.ndarray:
        """``(P, N)`` per-path discounted return of every agent."""
        disc = gamma ** np.arange(self.horizon)
        return np.einsum("ptn,t->pn", self.rewards, disc)


def collect_rollouts(learners: Sequence[Learner], env, n_paths: int, horizon: int,
                     env_rng: np.random.Generator, act_rng: np.random.Generator) -> RolloutSet:
    """Run the frozen policies on ``n_paths`` episodes in lockstep."""
    if env.n_envs != n_paths:
        raise ValueError(f"environment batch {env.n_envs} != requested paths {n_paths}")
    N = env.n_agents
    owner = {}
    for l_idx, learner in enumerate(learners):
        for a in learner.acts_for:
            owner[a] = (l_idx, learner.head_agents.index(a))
    if sorted(owner) != list(range(N)):
        raise ValueError("every agent must be driven by exactly one learner")
    obs = env.reset(env_rng)
    obs_buf = np.empty((n_paths, horizon, N, obs.shape[2]))
    act_buf = np.empty((n_paths, horizon, N), dtype=np.int64)
    rew_buf = np.empty((n_paths, horizon, N))
    coll = np.zeros((n_paths, N))
    for t in range(horizon):
        obs_buf[:, t] = obs
        head_lp = [None] * len(learners)
        for a in range(N):
            l_idx, h = owner[a]
            if head_lp[l_idx] is None:
                learner = learners[l_idx]
                head_lp[l_idx] = learner.policy.head_log_probs(obs[:, list(learner.obs_agents)].reshape(n_paths, -1))
            act_buf[:, t, a] = inverse_cdf(np.exp(head_lp[l_idx][h]), act_rng.random(n_paths))
        obs, rew, _ = env.step(act_buf[:, t])
        rew_buf[:, t] = rew
        if isinstance(env, ParticleWorld):
            coll += env.collisions()
    return RolloutSet(obs_buf, act_buf, rew_buf, coll, obs, truncated=isinstance(env, ParticleWorld))


METRIC_BASE = ("iter", "joint_return_mean", "joint_return_std")


@dataclass(frozen=True)
class TrainState:
    iteration: int
    learners: tuple[Learner, ...]
    graph: CommGraph | None
    config: RunConfig
    rng_states: dict = field(default_factory=dict)
    metrics: tuple[dict, ...] = ()

    @classmethod
    def initial(cls, config: RunConfig) -> "TrainState":
        learners = tuple(make_learners(config))
        graph = make_graph(config) if config.algorithm == "matrpo" else None
        rngs = {name: stream(config.seed, name).bit_generator.state for name in ("env", "actions", "admm-schedule")}
        return cls(0, learners, graph, config, rngs, ())

    def metric_columns(self) -> list[str]:
        N, L = self.config.n_agents, len(self.learners)
        cols = list(METRIC_BASE)
        cols += [f"return_{i}" for i in range(N)]
        cols += [f"kl_{l}" for l in range(L)]
        cols += [f"quad_kl_{l}" for l in range(L)]
        cols += [f"eta_{l}" for l in range(L)]
        cols += ["admm_final_residual"]
        return cols


@dataclass
class IterationInfo:
    """Side products of one iteration that do not belong in the metric history."""

    consensus: ConsensusResult | None = None
    rollouts: RolloutSet | None = None
    v_norms: list[float] = field(default_factory=list)


def _prepare(learner: Learner, rollouts: RolloutSet, config: RunConfig):
    """Advantages for the surrogate and a refit value function."""
    batch = rollouts.batch_for(learner)
    P, T = rollouts.n_paths, rollouts.horizon
    values = learner.value.predict(batch.obs).reshape(P, T)
    rewards = rollouts.learner_rewards(learner)
    # a time limit is not a terminal state, so cut paths bootstrap from V(o_T)
    if rollouts.truncated:
        bootstrap = learner.value.predict(rollouts.learner_final_obs(learner))
    else:
        bootstrap = np.zeros(P)
    adv = valuefn.gae(rewards, values, bootstrap, config.gamma, config.gae_lambda)
    targets = (adv + values).reshape(-1)
    new_value = valuefn.fit_value(learner.value, batch.obs, targets, config.value_epochs, config.value_lr,
                                     config.value_method)
    adv = adv.reshape(-1)
    if config.normalize_advantages:
        adv = valuefn.normalize(adv)
    return batch, adv, new_value


def policy_iteration(state: TrainState) -> tuple[TrainState, IterationInfo]:
    """One iteration of the configured algorithm; the input state is never mutated."""
    config = state.config
    env_rng = generator_from_state(state.rng_states["env"])
    act_rng = generator_from_state(state.rng_states["actions"])
    admm_rng = generator_from_state(state.rng_states["admm-schedule"])
    env = make_env(config, config.n_paths)
    rollouts = collect_rollouts(state.learners, env, config.n_paths, config.horizon_len, env_rng, act_rng)

    prepared = [_prepare(l, rollouts, config) for l in state.learners]
    subs = [policy_subproblem(idx, l.policy, batch, adv, l.radius, config.beta, config.cg_damping)
            for idx, (l, (batch, adv, _)) in enumerate(zip(state.learners, prepared))]
    # truncated CG: the step is rescaled onto the trust boundary whatever the residual
    cg = CGSettings(max_iter=config.cg_iters, tol=config.cg_tol, precondition=config.cg_precondition, strict=False)

    info = IterationInfo(rollouts=rollouts)
    if config.algorithm == "matrpo":
        result = run_consensus(subs, state.graph, config.admm_iters, admm_rng, cg)
        info.consensus = result
        candidates, steps = result.thetas, result.steps
        residual = result.final_residual
    else:
        steps = [theta_update(s, cg=cg) for s in subs]
        candidates = [s.theta for s in steps]
        residual = 0.0

    new_learners, kls, etas = [], [], []
    for learner, cand, (batch, _, new_value) in zip(state.learners, candidates, prepared):
        if config.backstop:
            theta, eta, kl = kl_backstop(learner.policy, cand, batch, learner.radius, config.backstop_factor)
        else:
            theta, eta = cand, 1.0
            kl = _exact_kl(learner.policy, theta, batch)
        kls.append(kl)
        etas.append(eta)
        new_learners.append(replace(learner, policy=learner.policy.with_theta(theta), value=new_value))
    info.v_norms = [s.v_norm if s is not None else 0.0 for s in steps]

    returns = rollouts.discounted_returns(config.gamma)
    joint = returns.sum(axis=1)
    row = {"iter": state.iteration, "joint_return_mean": float(joint.mean()),
           "joint_return_std": float(joint.std())}
    row.update({f"return_{i}": float(returns[:, i].mean()) for i in range(config.n_agents)})
    row.update({f"kl_{l}": float(k) for l, k in enumerate(kls)})
    row.update({f"quad_kl_{l}": float(s.quad_kl) if s is not None else 0.0 for l, s in enumerate(steps)})
    row.update({f"eta_{l}": float(e) for l, e in enumerate(etas)})
    row["admm_final_residual"] = float(residual)

    rngs = {"env": env_rng.bit_generator.state, "actions": act_rng.bit_generator.state,
            "admm-schedule": admm_rng.bit_generator.state}
    new_state = TrainState(state.iteration + 1, tuple(new_learners), state.graph, config, rngs,
                           state.metrics + (row,))
    return new_state, info


def _exact_kl(policy: FactoredPolicy, theta: np.ndarray, batch: SampleBatch) -> float:
    return mean_kl(policy.with_theta(theta), policy, batch)


def _check_algorithm(state: TrainState, name: str) -> None:
    if state.config.algorithm != name:
        raise ValueError(f"state is configured for {state.config.algorithm!r}, not {name!r}")


def matrpo_iteration(state: TrainState) -> TrainState:
    _check_algorithm(state, "matrpo")
    return policy_iteration(state)[0]


def centralized_trpo_iteration(state: TrainState) -> TrainState:
    _check_algorithm(state, "centralized")
    return policy_iteration(state)[0]


def independent_trpo_iteration(state: TrainState) -> TrainState:
    _check_algorithm(state, "independent")
    return policy_iteration(state)[0]


def evaluate_learners(learners: Sequence[Learner], config: RunConfig, episodes: int, seed: int,
                      batch: int = 100) -> dict:
    """Stochastic-policy evaluation: undiscounted joint return statistics."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env_rng, act_rng = stream(seed, "eval"), stream(seed, "eval-actions")
    rets, colls = [], []
    done = 0
    while done < episodes:
        n = min(batch, episodes - done)
        env = make_env(config, n)
        ro = collect_rollouts(learners, env, n, config.horizon_len, env_rng, act_rng)
        rets.append(ro.rewards.sum(axis=1))
        colls.append(ro.collisions)
        done += n
    per_agent = np.concatenate(rets)
    joint = per_agent.sum(axis=1)
    collisions = np.concatenate(colls)
    return {
        "episodes": episodes,
        "seed": seed,
        "joint_return_mean": float(joint.mean()),
        "joint_return_std": float(joint.std(ddof=1)) if episodes > 1 else 0.0,
        "joint_return_sem": float(joint.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0,
        "agent_returns": [float(v) for v in per_agent.mean(axis=0)],
        "collisions_per_episode": [float(v) for v in collisions.mean(axis=0)],
    }


def uniform_learners(config: RunConfig) -> list[Learner]:
    """Learners whose policies are exactly uniform (zero output layer)."""
    return make_learners(config.replace(algorithm="independent", policy_out_scale=0.0))


CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``state.json`` and ``params.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    meta = []
    for learner in state.learners:
        meta.append({"obs_agents": list(learner.obs_agents), "reward_agents": list(learner.reward_agents),
                     "head_agents": list(learner.head_agents), "acts_for": list(learner.acts_for),
                     "radius": learner.radius, "head_sizes": list(learner.policy.head_sizes),
                     "value_owner": learner.value.owner})
        blob += params_to_bytes(learner.policy.net)
        blob += params_to_bytes(learner.value.net)
    doc = {"version": CHECKPOINT_VERSION, "iteration": state.iteration, "config": state.config.to_ini(),
           "learners": meta, "rng_states": state.rng_states, "metrics": list(state.metrics)}
    tmp = path / "params.bin.tmp"
    tmp.write_bytes(bytes(blob))
    tmp.replace(path / "params.bin")
    tmp = path / "state.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path / "state.json")
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    for name in ("state.json", "params.bin"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"checkpoint file missing: {path / name}")
    doc = json.loads((path / "state.json").read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    config = parse_config(doc["config"], str(path / "state.json"))
    buf = (path / "params.bin").read_bytes()
    off = 0
    learners = []
    for meta in doc["learners"]:
        pol_net, used = params_from_bytes(buf[off:])
        off += used
        val_net, used = params_from_bytes(buf[off:])
        off += used
        policy = FactoredPolicy(pol_net, tuple(meta["head_sizes"]))
        value = ValueFunction(val_net, meta["value_owner"])
        learners.append(Learner(policy, value, tuple(meta["obs_agents"]), tuple(meta["reward_agents"]),
                                tuple(meta["head_agents"]), tuple(meta["acts_for"]), float(meta["radius"])))
    if off != len(buf):
        raise ShapeError(f"{len(buf) - off} trailing bytes in {path / 'params.bin'}")
    check_compatible(learners, config)
    graph = make_graph(config) if config.algorithm == "matrpo" else None
    return TrainState(doc["iteration"], tuple(learners), graph, config, doc["rng_states"], tuple(doc["metrics"]))


def check_compatible(learners: Sequence[Learner], config: RunConfig) -> None:
    """Raise ``ShapeError`` when stored networks do not fit the configured environment."""
    expected = make_learners(config)
    if len(expected) != len(learners):
        raise ShapeError(f"checkpoint has {len(learners)} learners, environment needs {len(expected)}")
    for k, (want, have) in enumerate(zip(expected, learners)):
        if want.policy.net.in_dim != have.policy.net.in_dim:
            raise ShapeError(f"learner {k}: policy input {have.policy.net.in_dim} != observation size "
                             f"{want.policy.net.in_dim}")
        if tuple(want.policy.head_sizes) != tuple(have.policy.head_sizes):
            raise ShapeError(f"learner {k}: heads {tuple(have.policy.head_sizes)} != action spaces "
                             f"{tuple(want.policy.head_sizes)}")
        if want.value.net.in_dim != have.value.net.in_dim:
            raise ShapeError(f"learner {k}: value input {have.value.net.in_dim} != {want.value.net.in_dim}")
