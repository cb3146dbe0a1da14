"""Assignment benchmark on a bipartite graph with one intermediate node per pair.

Node ids for an n x n problem: ``A_i = i``, ``E_ij = n + i * n + j`` and
``B_j = n + n * n + j``. Edges are ``A_i -> E_ij`` (in row-major order)
followed by ``E_ij -> B_j``; holding in place is the implicit self-loop of
the Euler chain. The running cost is ``C_ij`` on ``E_ij`` and zero elsewhere.
"""
import typing as T
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from graphbridge.costs import RunningCostSpec
from graphbridge.ctmc_engine import RolloutBatch
from graphbridge.exact_oracle import TransportPlan, solve_assignment
from graphbridge.exceptions import BridgeNumericalError, BridgeValidationError
from graphbridge.graph_core import DirectedGraph, ProblemInstance, RateGenerator
from graphbridge.utils.rng import generator_for

DEFAULT_HORIZON = 8
SINKHORN_ITERATIONS = 1000
SINKHORN_TOLERANCE = 1e-6
ZERO_FLUX_COST = 1e3
ENTROPY_EPSILON = 1e-12
SUPPORT_THRESHOLD = 1e-9


@dataclass
class AssignmentInstance:
    C: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    K: int = DEFAULT_HORIZON

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        n = self.C.shape[0]
        if self.C.ndim != 2 or self.C.shape != (n, n):
            raise BridgeValidationError(f"Cost matrix must be square, not {self.C.shape}")
        if not np.isfinite(self.C).all() or (self.C < 0).any():
            raise BridgeValidationError("Assignment costs must be finite and nonnegative")
        self.p0 = np.asarray(self.p0, dtype=float)
        self.p1 = np.asarray(self.p1, dtype=float)
        for name, p in (("p0", self.p0), ("p1", self.p1)):
            if p.shape != (n,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise BridgeValidationError(f"{name} must be a distribution over {n} rows")

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def a_node(self, i: int) -> int:
        return i

    def e_node(self, i: int, j: int) -> int:
        return self.n + i * self.n + j

    def b_node(self, j: int) -> int:
        return self.n + self.n * self.n + j

    @property
    def node_count(self) -> int:
        return self.n * self.n + 2 * self.n


def assignment_graph(n: int) -> DirectedGraph:
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = rows.ravel(), cols.ravel()
    middle = n + i * n + j
    edges = np.concatenate(
        [np.stack([i, middle], axis=1), np.stack([middle, n + n * n + j], axis=1)]
    )
    labels = {int(x): f"A{x}" for x in range(n)}
    labels.update({int(m): f"E{a},{b}" for m, a, b in zip(middle, i, j)})
    labels.update({n + n * n + b: f"B{b}" for b in range(n)})
    return DirectedGraph(n * n + 2 * n, edges, labels=labels)


def encode_assignment(
    C, p0, p1, K: int = DEFAULT_HORIZON, rate: float = 1.0, seed: int = 0
) -> ProblemInstance:
    """Graph bridge instance for the transport problem (C, p0, p1).

    Each A node leaves at total reference rate ``rate`` split evenly over its
    n pairs; each E node moves on at rate ``rate``.
    """
    problem = AssignmentInstance(C, p0, p1, K)
    n = problem.n
    graph = assignment_graph(n)
    rates = np.concatenate([np.full(n * n, rate / n), np.full(n * n, float(rate))])
    table = np.zeros(graph.node_count)
    table[n : n + n * n] = problem.C.ravel()
    mu = np.zeros(graph.node_count)
    mu[:n] = problem.p0
    nu = np.zeros(graph.node_count)
    nu[n + n * n :] = problem.p1
    return ProblemInstance(
        generator=RateGenerator(graph, rates),
        mu=mu,
        nu=nu,
        K=K,
        cost=RunningCostSpec.from_table(table),
        seed=seed,
        name=f"assignment-{n}",
        extras={"assignment": problem},
    )


def _problem(instance) -> AssignmentInstance:
    if isinstance(instance, AssignmentInstance):
        return instance
    try:
        return instance.extras["assignment"]
    except (AttributeError, KeyError):
        raise BridgeValidationError("Instance was not built by encode_assignment")


def flux_matrix(batch: RolloutBatch, n: int) -> np.ndarray:
    "(n, n) number of A_i -> E_ij transitions in the batch"
    a = batch.trajectories[:, :-1].ravel()
    b = batch.trajectories[:, 1:].ravel()
    moves = (a < n) & (b >= n) & (b < n + n * n)
    pairs = b[moves] - n
    return np.bincount(pairs, minlength=n * n).reshape(n, n).astype(float)


def decode_plan(batch: RolloutBatch, instance) -> TransportPlan:
    """Plan proportional to the A -> E flux, Sinkhorn-scaled to (p0, p1)"""
    import ot

    problem = _problem(instance)
    flux = flux_matrix(batch, problem.n)
    empty_rows = np.flatnonzero((flux.sum(axis=1) == 0) & (problem.p0 > 0))
    empty_cols = np.flatnonzero((flux.sum(axis=0) == 0) & (problem.p1 > 0))
    if empty_rows.size or empty_cols.size:
        where = (
            f"row {int(empty_rows[0])}" if empty_rows.size else f"column {int(empty_cols[0])}"
        )
        raise BridgeNumericalError(
            f"No flux reached {where} of the plan; train longer or use more rollouts"
        )
    with np.errstate(divide="ignore"):
        M = -np.log(flux / flux.sum())
    M = np.where(np.isfinite(M), M, ZERO_FLUX_COST)
    plan = ot.bregman.sinkhorn_knopp(
        problem.p0,
        problem.p1,
        M,
        reg=1.0,
        numItermax=SINKHORN_ITERATIONS,
        stopThr=SINKHORN_TOLERANCE,
        warn=False,
    )
    result = TransportPlan(plan=np.asarray(plan), cost=float((plan * problem.C).sum()))
    error = result.marginal_error(problem.p0, problem.p1)
    if error > SINKHORN_TOLERANCE:
        warnings.warn(
            f"Plan normalization stopped with marginal error {error:.2g} "
            f"after {SINKHORN_ITERATIONS} iterations"
        )
    return result


def hard_assignment(pi_hat) -> np.ndarray:
    "Permutation maximizing sum log pi_hat, resolved by the assignment oracle"
    return solve_assignment(-np.log(np.asarray(pi_hat, dtype=float) + ENTROPY_EPSILON))


def row_entropy(pi_hat) -> float:
    pi_hat = np.asarray(pi_hat, dtype=float)
    sums = pi_hat.sum(axis=1, keepdims=True)
    rows = pi_hat / np.where(sums > 0, sums, 1.0)
    return float((-(rows * np.log(rows + ENTROPY_EPSILON)).sum(axis=1)).mean())


@dataclass
class AssignmentReport:
    n: int
    optimal_cost: float
    assigned_cost: float
    cost_gap: float
    marginal_tv: float
    row_entropy: float
    mass_on_optimal: float
    accuracy: float
    hard_cost: float

    def as_dict(self) -> dict:
        return asdict(self)


def assignment_metrics(pi_hat, pi_star, C, p0=None, p1=None) -> AssignmentReport:
    pi_hat = np.asarray(pi_hat, dtype=float)
    pi_star = np.asarray(pi_star, dtype=float)
    C = np.asarray(C, dtype=float)
    if pi_hat.shape != pi_star.shape or pi_hat.shape != C.shape:
        raise BridgeValidationError("Plans and cost matrix must have the same shape")
    n = C.shape[0]
    p0 = pi_star.sum(axis=1) if p0 is None else np.asarray(p0, dtype=float)
    p1 = pi_star.sum(axis=0) if p1 is None else np.asarray(p1, dtype=float)
    optimal = float((C * pi_star).sum())
    assigned = float((C * pi_hat).sum())
    support = pi_star > SUPPORT_THRESHOLD
    sigma = hard_assignment(pi_hat)
    rows = np.arange(n)
    return AssignmentReport(
        n=n,
        optimal_cost=optimal,
        assigned_cost=assigned,
        cost_gap=assigned - optimal,
        marginal_tv=0.5
        * float(np.abs(pi_hat.sum(axis=1) - p0).sum() + np.abs(pi_hat.sum(axis=0) - p1).sum()),
        row_entropy=row_entropy(pi_hat),
        mass_on_optimal=float(pi_hat[support].sum() / max(pi_hat.sum(), 1e-300)),
        accuracy=float(support[rows, sigma].mean()),
        hard_cost=float(C[rows, sigma].sum()),
    )


def random_assignment_instance(
    n: int, seed: int
) -> T.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dirichlet(1) marginals and distances between uniform points in the unit square"""
    rng = generator_for(seed, n)
    p0 = rng.dirichlet(np.ones(n))
    p1 = rng.dirichlet(np.ones(n))
    u = rng.random((n, 2))
    v = rng.random((n, 2))
    return cdist(u, v), p0, p1
