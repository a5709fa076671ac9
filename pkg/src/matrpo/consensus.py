"""Asynchronous consensus ADMM over per-agent linearized trust-region problems.

Each agent ``q`` owns a parameter step ``x^q = theta^q - theta^q_old``; the
agents must agree on the linearized per-head log likelihood ratios
``J^{qn} x^q`` of every sample. Every edge ``e = (i, j)`` carries estimators
``z_e^{qn}`` and duals ``y_e^{qn}`` (one ``M``-vector per endpoint and head).
One ADMM iteration activates a random edge; its two endpoints recompute their
step in closed form and then the edge's estimators and duals are refreshed.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import CommGraph, sample_edge
from .policy import FactoredPolicy, PolicyLinearization, SampleBatch, mean_kl

log = logging.getLogger(__name__)

V_NORM_FLOOR = 1e-12


class ConjugateGradientError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class ConsensusError(RuntimeError):
    pass


@dataclass(frozen=True)
class CGSettings:
    max_iter: int = 100
    tol: float = 1e-10
    precondition: bool = True
    warm_start: bool = True
    # raise on non-convergence; training loops turn this off and log the residual instead
    strict: bool = True


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    tracked: np.ndarray | None = None  # T x when a tracking map was supplied


def conjugate_gradient(matvec: Callable, b: np.ndarray,
                       x0: np.ndarray | None = None, max_iter: int = 100, tol: float = 1e-10,
                       diag: np.ndarray | None = None, strict: bool = False,
                       track: Callable[[np.ndarray], np.ndarray] | None = None,
                       x0_track: np.ndarray | None = None) -> CGResult:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` (Jacobi-preconditioned if ``diag``).

    With ``track`` (a linear map ``T``) the solver also returns ``T x`` without
    extra products: ``matvec`` is then called as ``matvec(p, T p)`` and
    ``x0_track`` must hold ``T x0``.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)

    def apply(v):
        if track is None:
            return matvec(v), None
        tv = track(v)
        return matvec(v, tv), tv

    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, True, None if track is None else track(np.zeros_like(b)))
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
        tx = None
    else:
        x = np.array(x0, dtype=np.float64)
        if track is not None and x0_track is not None:
            tx = np.array(x0_track, dtype=np.float64)
            r = b - matvec(x, tx)
        else:
            ax, tx = apply(x)
            r = b - ax
    inv_d = None if diag is None else 1.0 / diag
    zr = r if inv_d is None else r * inv_d
    p = zr.copy()
    rz = r @ zr
    it = 0
    rel = np.linalg.norm(r) / bnorm
    while rel > tol and it < max_iter:
        Ap, tp = apply(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise ConjugateGradientError("operator is not positive definite", rel, it)
        alpha = rz / pAp
        x += alpha * p
        if tp is not None:
            tx = alpha * tp if tx is None else tx + alpha * tp
        r -= alpha * Ap
        zr = r if inv_d is None else r * inv_d
        rz_new = r @ zr
        p = zr + (rz_new / rz) * p
        rz = rz_new
        it += 1
        rel = np.linalg.norm(r) / bnorm
    if not np.all(np.isfinite(x)):
        raise ConjugateGradientError("non-finite iterate", rel, it)
    converged = rel <= tol
    if strict and not converged:
        raise ConjugateGradientError("conjugate gradient did not converge", rel, it)
    if track is not None and tx is None:
        tx = track(x)
    return CGResult(x, it, float(rel), converged, tx)


class DenseOperator:
    """Explicit Jacobians ``J^n`` (``M x D`` each) with a dense Fisher matrix.

    The Fisher defaults to ``(1/M) sum_n J^{nT} J^n + damping I``; a custom
    matrix can be supplied for synthetic problems.
    """

    def __init__(self, jacobians: Sequence[np.ndarray], fisher: np.ndarray | None = None, damping: float = 0.0):
        self.J = [np.asarray(j, dtype=np.float64) for j in jacobians]
        M, D = self.J[0].shape
        if any(j.shape != (M, D) for j in self.J):
            raise ValueError("all head Jacobians must share one shape")
        if fisher is None:
            fisher = sum(j.T @ j for j in self.J) / M + damping * np.eye(D)
        self.F = np.asarray(fisher, dtype=np.float64)
        self.damping = damping

    @property
    def n_samples(self) -> int:
        return self.J[0].shape[0]

    @property
    def n_heads(self) -> int:
        return len(self.J)

    @property
    def dim(self) -> int:
        return self.J[0].shape[1]

    def jvp(self, x: np.ndarray) -> np.ndarray:
        return np.stack([j @ x for j in self.J], axis=1)

    def vjp(self, w: np.ndarray) -> np.ndarray:
        return sum(j.T @ w[:, n] for n, j in enumerate(self.J))

    def fvp(self, v: np.ndarray, jv: np.ndarray | None = None) -> np.ndarray:
        return self.F @ v

    def fisher_diagonal(self) -> np.ndarray:
        return np.diag(self.F).copy()

    def quad(self, x: np.ndarray, jx: np.ndarray) -> float:
        return float(x @ self.F @ x)


def _policy_quad(lin: PolicyLinearization, x: np.ndarray, jx: np.ndarray) -> float:
    return float(np.sum(jx * jx) / lin.n_samples + lin.damping * (x @ x))


@dataclass
class TrustRegionSubproblem:
    """Agent ``agent``'s linearized problem at its frozen parameters."""

    agent: int
    theta_old: np.ndarray
    op: object  # PolicyLinearization or DenseOperator
    advantages: np.ndarray
    radius: float
    beta: float = 1.0

    def __post_init__(self):
        self.theta_old = np.asarray(self.theta_old, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64).reshape(-1)
        if self.radius <= 0 or self.beta <= 0:
            raise ValueError("trust radius and penalty must be positive")
        if self.advantages.size != self.op.n_samples:
            raise ValueError(f"{self.advantages.size} advantages for {self.op.n_samples} samples")
        if self.theta_old.size != self.op.dim:
            raise ValueError("theta_old does not match the operator dimension")
        self._diag = None

    def quad(self, x: np.ndarray, jx: np.ndarray) -> float:
        if isinstance(self.op, PolicyLinearization):
            return _policy_quad(self.op, x, jx)
        return self.op.quad(x, jx)

    def preconditioner(self) -> np.ndarray:
        if self._diag is None:
            self._diag = np.maximum(self.op.fisher_diagonal(), 1e-12)
        return self._diag


def policy_subproblem(agent: int, policy_old: FactoredPolicy, batch: SampleBatch, advantages: np.ndarray,
                      radius: float, beta: float = 1.0, damping: float = 1e-3) -> TrustRegionSubproblem:
    op = PolicyLinearization(policy_old, batch, damping)
    return TrustRegionSubproblem(agent, policy_old.theta, op, advantages, radius, beta)


@dataclass
class ConsensusState:
    """Estimators and duals, indexed ``[edge, endpoint slot, head, sample]``.

    Slot 0 belongs to ``graph.edges[e][0]`` and slot 1 to ``graph.edges[e][1]``.
    """

    z: np.ndarray
    y: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, n_edges: int, n_heads: int, n_samples: int) -> "ConsensusState":
        shape = (n_edges, 2, n_heads, n_samples)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class ThetaStep:
    theta: np.ndarray
    step: np.ndarray
    jx: np.ndarray  # M x N, J^{qn} (theta - theta_old)
    quad_kl: float
    cg_iterations: int
    cg_residual: float
    trust_dual: float
    v_norm: float
    direction: np.ndarray | None = None  # unscaled H^-1 V, reused as a CG warm start
    direction_jx: np.ndarray | None = None  # J applied to ``direction``


def consensus_weights(sub: TrustRegionSubproblem, state: ConsensusState, graph: CommGraph | None) -> np.ndarray:
    """``M x N`` weights ``A - sum_e C y + beta sum_e C z`` whose J-transpose gives ``M V``."""
    w = np.repeat(sub.advantages[:, None], sub.op.n_heads, axis=1)
    if graph is None:
        return w
    q = sub.agent
    for e in graph.incident[q]:
        slot = 0 if graph.edges[e][0] == q else 1
        c = graph.weights[e, slot]
        w += (c * (sub.beta * state.z[e, slot] - state.y[e, slot])).T
    return w


def theta_update(sub: TrustRegionSubproblem, state: ConsensusState | None = None,
                 graph: CommGraph | None = None, cg: CGSettings = CGSettings(),
                 x0: np.ndarray | None = None, x0_jx: np.ndarray | None = None) -> ThetaStep:
    """Closed-form maximizer of the agent's augmented Lagrangian on the trust-region boundary.

    ``theta = theta_old + sqrt(2 r / V^T H^-1 V) H^-1 V`` with ``H^-1 V`` from
    conjugate gradient. The scale uses ``x^T H x`` of the computed ``x`` so the
    quadratic KL equals the radius to rounding even for an inexact solve.
    """
    op = sub.op
    M = op.n_samples
    if state is None or graph is None:
        w = consensus_weights(sub, state, None)
        n_inc = 0
    else:
        w = consensus_weights(sub, state, graph)
        n_inc = len(graph.incident[sub.agent])
    V = op.vjp(w) / M
    v_norm = float(np.linalg.norm(V))
    zero_jx = np.zeros((M, op.n_heads))
    if v_norm < V_NORM_FLOOR:
        return ThetaStep(sub.theta_old.copy(), np.zeros_like(sub.theta_old), zero_jx, 0.0, 0, 0.0, float("nan"), v_norm)
    diag = sub.preconditioner() if cg.precondition else None
    warm = cg.warm_start and x0 is not None
    res = conjugate_gradient(op.fvp, V, x0=x0 if warm else None, max_iter=cg.max_iter, tol=cg.tol, diag=diag,
                             strict=cg.strict, track=op.jvp, x0_track=x0_jx if warm else None)
    x, jx = res.x, res.tracked
    xhx = sub.quad(x, jx)
    if not xhx > 0.0:
        raise ConjugateGradientError("degenerate search direction", res.residual, res.iterations)
    scale = np.sqrt(2.0 * sub.radius / xhx)
    step = scale * x
    vhv = max(float(V @ x), 0.0)
    trust_dual = float(np.sqrt(vhv / (2.0 * sub.radius)) - n_inc * sub.beta)
    return ThetaStep(sub.theta_old + step, step, scale * jx, 0.5 * scale * scale * xhx,
                     res.iterations, res.residual, trust_dual, v_norm, x, jx)


def edge_zy_update(state: ConsensusState, graph: CommGraph, e: int, jx_i: np.ndarray, jx_j: np.ndarray,
                   beta: float) -> float:
    """Refresh ``z_e`` and ``y_e`` in place from the endpoints' fresh ``J x`` (``M x N`` each).

    Returns the edge's primal residual ``max ||C J x - z||`` after the update.
    """
    u = np.stack([graph.weights[e, 0] * jx_i.T, graph.weights[e, 1] * jx_j.T])  # (2, N, M)
    y_old = state.y[e]
    nu = 0.5 * np.sum(y_old + beta * u, axis=0)
    state.z[e] = (y_old - nu[None]) / beta + u
    state.y[e] = np.broadcast_to(nu, y_old.shape)
    return float(np.max(np.linalg.norm(u - state.z[e], axis=2)))


@dataclass
class ConsensusResult:
    thetas: list[np.ndarray]
    steps: list[ThetaStep | None]
    state: ConsensusState
    diagnostics: list[dict] = field(default_factory=list)
    activations: np.ndarray | None = None
    final_residual: float = 0.0

    @property
    def quad_kls(self) -> list[float]:
        return [s.quad_kl if s is not None else 0.0 for s in self.steps]


def primal_residual(state: ConsensusState, graph: CommGraph, jxs: Sequence[np.ndarray]) -> float:
    """Largest ``||C_e^q J^{qn} x^q - z_e^{qn}||`` over all edges, endpoints and heads."""
    worst = 0.0
    for e, (i, j) in enumerate(graph.edges):
        for slot, q in enumerate((i, j)):
            u = graph.weights[e, slot] * jxs[q].T
            worst = max(worst, float(np.max(np.linalg.norm(u - state.z[e, slot], axis=1))))
    return worst


DIAGNOSTIC_FIELDS = ("iter", "edge", "agent_i", "agent_j", "primal_residual", "disagreement",
                     "quad_kl_i", "quad_kl_j", "v_norm_i", "v_norm_j", "cg_iters_i", "cg_iters_j", "cg_residual_i",
                     "cg_residual_j", "trust_dual_i", "trust_dual_j")


def run_consensus(subproblems: Sequence[TrustRegionSubproblem], graph: CommGraph, iters: int,
                  rng: np.random.Generator, cg: CGSettings = CGSettings()) -> ConsensusResult:
    """Asynchronous edge-activated ADMM; returns every agent's latest parameters.

    Agents that are never activated keep ``theta_old``. With no edges each
    agent takes one plain natural-gradient trust-region step.
    """
    if iters < 1:
        raise ValueError("need at least one ADMM iteration")
    n = len(subproblems)
    if graph.n_nodes != n or any(s.agent != q for q, s in enumerate(subproblems)):
        raise ConsensusError("subproblems must be listed in agent order and match the graph")
    M, N = subproblems[0].op.n_samples, subproblems[0].op.n_heads
    if any(s.op.n_samples != M or s.op.n_heads != N for s in subproblems):
        raise ConsensusError("all agents must share the sample alignment and head count")
    state = ConsensusState.zeros(graph.n_edges, N, M)
    steps: list[ThetaStep | None] = [None] * n
    jxs = [np.zeros((M, N)) for _ in range(n)]
    warm: list[tuple | None] = [None] * n
    activations = np.zeros(n, dtype=np.int64)
    diagnostics: list[dict] = []

    def update(q: int, k: int) -> ThetaStep:
        try:
            x0, x0_jx = warm[q] if warm[q] is not None else (None, None)
            st = theta_update(subproblems[q], state, graph, cg, x0=x0, x0_jx=x0_jx)
        except ConjugateGradientError as exc:
            raise ConsensusError(f"theta update of agent {q} failed at ADMM iteration {k}: {exc}") from exc
        steps[q] = st
        jxs[q] = st.jx
        if st.direction is not None:
            warm[q] = (st.direction, st.direction_jx)
        activations[q] += 1
        return st

    if graph.n_edges == 0:
        for q in range(n):
            update(q, 0)
    else:
        for k in range(iters):
            e = sample_edge(graph, rng)
            i, j = graph.edges[e]
            si, sj = update(i, k), update(j, k)
            res = edge_zy_update(state, graph, e, jxs[i], jxs[j], subproblems[i].beta)
            disagreement = float(np.max(np.linalg.norm(jxs[i] - jxs[j], axis=0)))
            state.k = k + 1
            diagnostics.append({
                "iter": k, "edge": e, "agent_i": i, "agent_j": j, "primal_residual": res,
                "disagreement": disagreement, "quad_kl_i": si.quad_kl, "quad_kl_j": sj.quad_kl,
                "v_norm_i": si.v_norm, "v_norm_j": sj.v_norm,
                "cg_iters_i": si.cg_iterations, "cg_iters_j": sj.cg_iterations,
                "cg_residual_i": si.cg_residual, "cg_residual_j": sj.cg_residual,
                "trust_dual_i": si.trust_dual, "trust_dual_j": sj.trust_dual,
            })
    thetas = [steps[q].theta if steps[q] is not None else subproblems[q].theta_old.copy() for q in range(n)]
    final = primal_residual(state, graph, jxs) if graph.n_edges else 0.0
    return ConsensusResult(thetas, steps, state, diagnostics, activations, final)


def write_diagnostics(rows: Sequence[dict], path, extra: dict | None = None, append: bool = False) -> None:
    """Append-friendly CSV of per-iteration ADMM diagnostics."""
    fields = list(extra or {}) + list(DIAGNOSTIC_FIELDS)
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        if not append or fh.tell() == 0:
            writer.writeheader()
        for row in rows:
            writer.writerow({**(extra or {}), **{k: _fmt(row[k]) for k in DIAGNOSTIC_FIELDS}})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def kl_backstop(policy_old: FactoredPolicy, theta_candidate: np.ndarray, batch: SampleBatch, radius: float,
                factor: float = 1.5, max_halvings: int = 10) -> tuple[np.ndarray, float, float]:
    """Shrink the step until the exact sampled KL is within ``factor * radius``.

    Returns ``(theta, eta, kl)``; ``eta = 0`` means the step was abandoned.
    """
    theta_old = policy_old.theta
    step = np.asarray(theta_candidate, dtype=np.float64) - theta_old
    limit = factor * radius
    eta = 1.0
    for _ in range(max_halvings + 1):
        theta = theta_old + eta * step
        kl = mean_kl(policy_old.with_theta(theta), policy_old, batch)
        if np.isfinite(kl) and kl <= limit:
            return theta, eta, kl
        eta *= 0.5
    log.info("backstop rejected step: KL %.3g > %.3g after %d halvings", kl, limit, max_halvings)
    return theta_old.copy(), 0.0, 0.0
