"""Factored categorical policies and their linearization at a frozen point.

An agent's local policy is one MLP whose output is split into ``N`` softmax
heads, one per agent's action. The joint probability of ``a = (a^1..a^N)`` is
the product of the head marginals, and the agent itself only ever samples its
own head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .diffkit import MlpParams, MlpTape, ShapeError, init_params


@dataclass(frozen=True)
class FactoredPolicy:
    net: MlpParams
    head_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.head_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ShapeError(f"head sizes must be positive, got {sizes}")
        if sum(sizes) != self.net.out_dim:
            raise ShapeError(f"net output {self.net.out_dim} != sum of head sizes {sum(sizes)}")
        object.__setattr__(self, "head_sizes", sizes)

    @classmethod
    def create(cls, obs_dim: int, head_sizes: Sequence[int], hidden: Sequence[int],
               rng: np.random.Generator, out_scale: float = 0.01) -> "FactoredPolicy":
        sizes = (obs_dim, *hidden, sum(head_sizes))
        return cls(init_params(sizes, rng, out_scale=out_scale), tuple(head_sizes))

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    @property
    def n_heads(self) -> int:
        return len(self.head_sizes)

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @property
    def head_slices(self) -> list[slice]:
        offsets = np.concatenate([[0], np.cumsum(self.head_sizes)])
        return [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]

    def with_theta(self, theta: np.ndarray) -> "FactoredPolicy":
        return FactoredPolicy(self.net.with_theta(theta), self.head_sizes)

    def same_architecture(self, other: "FactoredPolicy") -> bool:
        return self.net.layer_sizes == other.net.layer_sizes and self.head_sizes == other.head_sizes

    def head_log_probs(self, obs: np.ndarray) -> list[np.ndarray]:
        logits = MlpTape(self.net, obs).output
        return [log_softmax(logits[:, s], axis=1) for s in self.head_slices]


@dataclass(frozen=True)
class SampleBatch:
    """``M`` aligned samples: observations and the joint action taken at each.

    ``actions`` has one column per policy head. ``path_ids``/``timesteps`` are
    optional bookkeeping that map sample ``m`` back to (path, step).
    """

    obs: np.ndarray
    actions: np.ndarray
    path_ids: np.ndarray | None = None
    timesteps: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.int64)
        if actions.ndim == 1:
            actions = actions[:, None]
        if obs.ndim != 2 or actions.shape[0] != obs.shape[0]:
            raise ShapeError(f"obs {obs.shape} and actions {actions.shape} are not aligned")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "actions", actions)

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def _check_batch(policy: FactoredPolicy, batch: SampleBatch) -> None:
    if batch.obs.shape[1] != policy.obs_dim:
        raise ShapeError(f"batch obs dim {batch.obs.shape[1]} != policy obs dim {policy.obs_dim}")
    if batch.actions.shape[1] != policy.n_heads:
        raise ShapeError(f"batch has {batch.actions.shape[1]} action columns, policy has {policy.n_heads} heads")
    for n, k in enumerate(policy.head_sizes):
        col = batch.actions[:, n]
        if col.size and (col.min() < 0 or col.max() >= k):
            raise ShapeError(f"action index out of range for head {n} (size {k})")


def _check_pair(new: FactoredPolicy, old: FactoredPolicy) -> None:
    if not new.same_architecture(old):
        raise ShapeError("new and old policies have different architectures")


def sample_head(policy: FactoredPolicy, head: int, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw head ``head``'s action for every row of ``obs`` by inverse-CDF sampling."""
    if not 0 <= head < policy.n_heads:
        raise ShapeError(f"head {head} out of range for {policy.n_heads} heads")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    logits = MlpTape(policy.net, obs).output[:, policy.head_slices[head]]
    probs = np.exp(log_softmax(logits, axis=1))
    return inverse_cdf(probs, rng.random(obs.shape[0]))


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    a = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


def act(policy: FactoredPolicy, own_head: int, obs: np.ndarray, rng: np.random.Generator) -> int:
    return int(sample_head(policy, own_head, np.asarray(obs)[None, :], rng)[0])


def log_ratio_heads(policy_new: FactoredPolicy, policy_old: FactoredPolicy, batch: SampleBatch) -> np.ndarray:
    """``M x N`` matrix of per-head log likelihood ratios at the sampled actions."""
    _check_pair(policy_new, policy_old)
    _check_batch(policy_old, batch)
    rows = np.arange(batch.size)
    new_lp = policy_new.head_log_probs(batch.obs)
    old_lp = policy_old.head_log_probs(batch.obs)
    out = np.empty((batch.size, policy_old.n_heads))
    for n in range(policy_old.n_heads):
        a = batch.actions[:, n]
        out[:, n] = new_lp[n][rows, a] - old_lp[n][rows, a]
    return out


def head_kls(policy_new: FactoredPolicy, policy_old: FactoredPolicy, batch: SampleBatch) -> np.ndarray:
    """Per-head sample-average KL(old || new)."""
    _check_pair(policy_new, policy_old)
    new_lp = policy_new.head_log_probs(batch.obs)
    old_lp = policy_old.head_log_probs(batch.obs)
    kls = [np.mean(np.sum(np.exp(lo) * (lo - ln), axis=1)) for lo, ln in zip(old_lp, new_lp)]
    return np.maximum(np.array(kls), 0.0)


def mean_kl(policy_new: FactoredPolicy, policy_old: FactoredPolicy, batch: SampleBatch) -> float:
    """Sample-average KL of the factored joint, i.e. the sum of per-head KLs."""
    return float(head_kls(policy_new, policy_old, batch).sum())


@dataclass
class PolicyLinearization:
    """Score-function Jacobians of a frozen policy on a fixed batch.

    Row ``m`` of ``J^n`` is grad log pi(a^n_m | o_m) at the frozen parameters.
    ``J^n`` is never formed; products go through the cached forward tape.
    """

    policy: FactoredPolicy
    batch: SampleBatch
    damping: float = 0.0
    _tape: MlpTape = field(init=False, repr=False)
    _probs: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        _check_batch(self.policy, self.batch)
        self._tape = MlpTape(self.policy.net, self.batch.obs)
        logits = self._tape.output
        self._probs = [np.exp(log_softmax(logits[:, s], axis=1)) for s in self.policy.head_slices]
        M = self.batch.size
        self._onehots = []
        for n, k in enumerate(self.policy.head_sizes):
            oh = np.zeros((M, k))
            oh[np.arange(M), self.batch.actions[:, n]] = 1.0
            self._onehots.append(oh)
        self._slices = self.policy.head_slices

    @property
    def n_samples(self) -> int:
        return self.batch.size

    @property
    def n_heads(self) -> int:
        return self.policy.n_heads

    @property
    def dim(self) -> int:
        return self.policy.net.size

    def jvp(self, x: np.ndarray) -> np.ndarray:
        """``M x N`` matrix whose column ``n`` is ``J^n x``."""
        dlogits = self._tape.jvp(x)
        out = np.empty((self.n_samples, self.n_heads))
        for n, s in enumerate(self._slices):
            d = dlogits[:, s]
            out[:, n] = np.sum((self._onehots[n] - self._probs[n]) * d, axis=1)
        return out

    def vjp(self, w: np.ndarray) -> np.ndarray:
        """``sum_n J^{nT} w[:, n]`` for an ``M x N`` weight matrix."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n_samples, self.n_heads):
            raise ShapeError(f"weights shape {w.shape} != ({self.n_samples}, {self.n_heads})")
        adj = np.empty_like(self._tape.output)
        for n, s in enumerate(self._slices):
            adj[:, s] = w[:, n:n + 1] * (self._onehots[n] - self._probs[n])
        return self._tape.vjp(adj)

    def fvp(self, v: np.ndarray, jv: np.ndarray | None = None) -> np.ndarray:
        """Sampled Fisher product ``(1/M) sum_n J^{nT} J^n v + damping v``.

        ``jv`` may pass a precomputed ``jvp(v)``.
        """
        if jv is None:
            jv = self.jvp(v)
        return self.vjp(jv) / self.n_samples + self.damping * v

    def fisher_diagonal(self) -> np.ndarray:
        """Exact diagonal of the sampled Fisher (including damping).

        Per-sample gradients of a dense layer are outer products, so their
        squares sum to a matrix product of squared factors.
        """
        layers = self.policy.net.layers()
        total = np.zeros(self.dim)
        for n, s in enumerate(self._slices):
            g = np.zeros_like(self._tape.output)
            g[:, s] = self._onehots[n] - self._probs[n]
            parts = [None] * len(layers)
            for idx in range(len(layers) - 1, -1, -1):
                a = self._tape.inputs[idx]
                parts[idx] = ((a * a).T @ (g * g), np.sum(g * g, axis=0))
                if idx > 0:
                    g = (g @ layers[idx][0].T) * self._tape.slopes[idx - 1]
            total += np.concatenate([np.concatenate([W.ravel(), b]) for W, b in parts])
        return total / self.n_samples + self.damping


def linearize(policy_old: FactoredPolicy, batch: SampleBatch, damping: float = 0.0) -> PolicyLinearization:
    return PolicyLinearization(policy_old, batch, damping)


def ratio_jvp(policy_old: FactoredPolicy, batch: SampleBatch, head: int, direction: np.ndarray) -> np.ndarray:
    return linearize(policy_old, batch).jvp(direction)[:, head]


def ratio_vjp(policy_old: FactoredPolicy, batch: SampleBatch, head: int, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (batch.size,):
        raise ShapeError(f"weights shape {weights.shape} != ({batch.size},)")
    w = np.zeros((batch.size, policy_old.n_heads))
    w[:, head] = weights
    return linearize(policy_old, batch).vjp(w)


def fisher_vec_product(policy_old: FactoredPolicy, batch: SampleBatch, v: np.ndarray,
                       damping: float = 0.0) -> np.ndarray:
    return linearize(policy_old, batch, damping).fvp(v)
