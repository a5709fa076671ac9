"""Shared builders for small, exactly-known policies and problems."""
from __future__ import annotations

import itertools
import warnings

import numpy as np

from matrpo.diffkit import MlpParams, flatten, init_params, selu
from matrpo.policy import FactoredPolicy, SampleBatch, mean_kl


# undiscounted joint return of uniform-random play, navigation N=3, 1000 episodes (eval seed 12345)
UNIFORM_NAV3_MEAN = -231.5864030014648
UNIFORM_NAV3_SEM = 3.1134350586863637


def constant_policy(head_logits):
    """Policy whose logits ignore the (1-d) observation: bias only."""
    logits = np.concatenate([np.asarray(h, dtype=float) for h in head_logits])
    net = MlpParams((1, logits.size), flatten([(np.zeros((1, logits.size)), logits)]))
    return FactoredPolicy(net, tuple(len(h) for h in head_logits))


def random_policy(obs_dim, head_sizes, hidden, seed, out_scale=1.0):
    rng = np.random.default_rng(seed)
    return FactoredPolicy.create(obs_dim, head_sizes, hidden, rng, out_scale=out_scale)


def random_batch(policy, M, seed):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(M, policy.obs_dim))
    actions = np.stack([rng.integers(0, k, size=M) for k in policy.head_sizes], axis=1)
    return SampleBatch(obs, actions)


# head probabilities (1/2, 1/4, 1/4): four samples per observation reproduce them exactly
RATIONAL_PROBS = np.array([0.5, 0.25, 0.25])
STRATIFIED_ACTIONS = (0, 0, 1, 2)


def rational_policy(n_obs=3, obs_dim=2, hidden=6, n_heads=2, seed=0):
    """Hidden-layer policy whose heads equal ``RATIONAL_PROBS`` (up to a head-specific
    permutation) at each of ``n_obs`` observations, plus those observations.

    The output layer is solved by least squares, so logits are exact to rounding
    while every layer still carries nonzero curvature.
    """
    rng = np.random.default_rng(seed)
    first = init_params((obs_dim, hidden, hidden), rng)
    obs = rng.normal(size=(n_obs, obs_dim))
    W1, b1 = first.layers()[0]
    W2, b2 = first.layers()[1]
    h = selu(selu(obs @ W1 + b1) @ W2 + b2)
    feats = np.hstack([h, np.ones((n_obs, 1))])
    targets = []
    perms = []
    for o in range(n_obs):
        row, prow = [], []
        for n in range(n_heads):
            perm = rng.permutation(3)
            prow.append(perm)
            row.append(np.log(RATIONAL_PROBS[perm]) + rng.normal())  # arbitrary per-head shift
        targets.append(np.concatenate(row))
        perms.append(prow)
    sol, *_ = np.linalg.lstsq(feats, np.array(targets), rcond=None)
    W3, b3 = sol[:-1], sol[-1]
    theta = flatten([(W1, b1), (W2, b2), (W3, b3)])
    policy = FactoredPolicy(MlpParams((obs_dim, hidden, hidden, 3 * n_heads), theta), (3,) * n_heads)
    return policy, obs, perms


def stratified_batch(obs, perms):
    """Per observation, four samples whose per-head action counts match the head probabilities."""
    rows, acts = [], []
    for o, prow in enumerate(perms):
        for k in range(4):
            rows.append(obs[o])
            # action index j has probability RATIONAL_PROBS[perm^-1 ...]: pick a[perm] ordering
            acts.append([int(np.argsort(p)[STRATIFIED_ACTIONS[k]]) for p in prow])
    return SampleBatch(np.array(rows), np.array(acts))


def kl_hessian_fd(policy, batch, v, eps=1e-4):
    """``(d^2 mean_kl / d theta^2) v`` at ``policy`` by mixed central differences of the scalar KL."""
    theta = policy.theta
    D = theta.size
    out = np.empty(D)

    def kl(delta):
        return mean_kl(policy.with_theta(theta + delta), policy, batch)

    for k in range(D):
        e = np.zeros(D)
        e[k] = eps
        w = eps * v
        out[k] = (kl(e + w) - kl(e - w) - kl(-e + w) + kl(-e - w)) / (4 * eps * eps)
    return out


def all_joint(sizes):
    return list(itertools.product(*[range(k) for k in sizes]))


def dense_pair_problem(seed, beta=1.0):
    """Two agents, one edge, ``J_j^n = J_i^n T`` so the ratio constraints are satisfiable.

    Returns ``(subproblems, graph, data)`` where ``data`` holds the raw matrices.
    """
    from matrpo.consensus import DenseOperator, TrustRegionSubproblem
    from matrpo.graph import build_ring

    rng = np.random.default_rng(seed)
    D = int(rng.integers(3, 11))
    N = int(rng.integers(1, 3))
    M = int(rng.integers(-(-D // N), 17))
    Ji = [rng.normal(size=(M, D)) for _ in range(N)]
    T = np.eye(D) + 0.3 * rng.normal(size=(D, D)) / np.sqrt(D)
    Jj = [J @ T for J in Ji]
    radius = float(rng.uniform(0.01, 1.0))
    adv = [rng.normal(size=M), rng.normal(size=M)]
    subs = [TrustRegionSubproblem(q, np.zeros(D), DenseOperator(J), a, radius, beta)
            for q, (J, a) in enumerate(zip((Ji, Jj), adv))]
    return subs, build_ring(2), {"J": (Ji, Jj), "adv": adv, "radius": radius, "M": M, "D": D}


def centralized_pair_optimum(data):
    """Dense QCQP: maximise sum_q g_q.x_q subject to J_i x_i = J_j x_j and both trust regions."""
    import cvxpy as cp

    Ji, Jj = data["J"]
    M, D, r = data["M"], data["D"], data["radius"]
    xs = [cp.Variable(D), cp.Variable(D)]
    cons = []
    obj = 0
    for q, J in enumerate((Ji, Jj)):
        g = sum(Jn.T @ data["adv"][q] for Jn in J) / M
        H = sum(Jn.T @ Jn for Jn in J) / M
        L = np.linalg.cholesky(H + 1e-14 * np.eye(D))
        obj = obj + g @ xs[q]
        cons.append(0.5 * cp.sum_squares(L.T @ xs[q]) <= r)
    for A, B in zip(Ji, Jj):
        cons.append(A @ xs[0] == B @ xs[1])
    prob = cp.Problem(cp.Maximize(obj), cons)
    with warnings.catch_warnings():
        # "inaccurate" at these tight tolerances still lands within 1e-9 of the optimum
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return float(prob.value), [np.asarray(x.value) for x in xs]


def pair_objective(data, steps):
    M = data["M"]
    total = 0.0
    for q, J in enumerate(data["J"]):
        g = sum(Jn.T @ data["adv"][q] for Jn in J) / M
        total += float(g @ steps[q])
    return total


def tables(rng, n, k):
    return [rng.dirichlet(np.ones(k)) for _ in range(n)]


def consensus_instance(rng, n_agents, k):
    """Matrix game plus tabular policies whose head-n ratios coincide across agents (old heads agree too)."""
    from matrpo.env import MatrixGame

    game = MatrixGame.random(n_agents, k, rng)
    own_old = tables(rng, n_agents, k)
    own_new = tables(rng, n_agents, k)
    old = [[own_old[n].copy() for n in range(n_agents)] for _ in range(n_agents)]
    new = [[own_new[n].copy() for n in range(n_agents)] for _ in range(n_agents)]
    return game, old, new
