"""Euler-chain simulation of controlled CTMCs.

Over one step of length ``dt`` a walker at ``x`` jumps to ``y`` with
probability ``u(y, x) * dt`` and stays with the remaining probability. When
the jump mass of a node exceeds one, its jump probabilities are scaled so the
stay probability is exactly zero and the clamp counter is incremented.
"""
import typing as T
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from graphbridge.exceptions import (
    AbsoluteContinuityError,
    BridgeSimulationError,
    BridgeStiffnessError,
    BridgeValidationError,
)
from graphbridge.graph_core import DirectedGraph, RateGenerator
from graphbridge.utils.rng import blocks, generator_for

logger = getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"

DRIFT_TOLERANCE = 1e-9


class Policy(ABC):
    """Anything that yields nonnegative jump rates on the edges of ``graph``."""

    graph: DirectedGraph

    @abstractmethod
    def edge_rates(self, k: int) -> np.ndarray:
        """Rates of every edge of ``self.graph`` during step ``k``"""

    def rate_table(self, steps: int) -> np.ndarray:
        table = np.empty((steps, self.graph.edge_count))
        for k in range(steps):
            table[k] = self.edge_rates(k)
        return table

    def rate(self, k: int, x: int, y: int) -> float:
        return float(self.edge_rates(k)[self.graph.edge_index(x, y)])


class EdgeRatePolicy(Policy):
    "Fixed rates, either (E,) for every step or a (steps, E) table"

    def __init__(self, graph: DirectedGraph, rates):
        self.graph = graph
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.shape[-1] != graph.edge_count:
            raise BridgeValidationError(
                f"Expected {graph.edge_count} rates per step, got shape {self.rates.shape}"
            )

    @classmethod
    def from_generator(cls, generator: RateGenerator) -> "EdgeRatePolicy":
        return cls(generator.graph, generator.rates)

    def edge_rates(self, k: int) -> np.ndarray:
        if self.rates.ndim == 1:
            return self.rates
        return self.rates[k]


def as_policy(dynamics: T.Union[Policy, RateGenerator]) -> Policy:
    if isinstance(dynamics, RateGenerator):
        return EdgeRatePolicy.from_generator(dynamics)
    return dynamics


@dataclass
class StepDistribution:
    jump: np.ndarray
    stay: float
    clamped: bool


def step_distribution(rates_out_of_x, dt: float) -> StepDistribution:
    """One-step law of the Euler chain from a single node.

    ``rates_out_of_x`` lists the rates to each neighbor; the result holds the
    matching jump probabilities and the stay probability.
    """
    if dt <= 0:
        raise BridgeValidationError(f"dt must be positive, not {dt}")
    rates = np.asarray(rates_out_of_x, dtype=float)
    if not np.isfinite(rates).all() or (rates < 0).any():
        raise BridgeSimulationError(f"Invalid rates {rates.tolist()}")
    jump = rates * dt
    total = jump.sum()
    if total > 1.0:
        return StepDistribution(jump=jump / total, stay=0.0, clamped=True)
    return StepDistribution(jump=jump, stay=1.0 - total, clamped=False)


def _checked_rates(policy: Policy, k: int) -> np.ndarray:
    rates = np.asarray(policy.edge_rates(k), dtype=float)
    bad = ~np.isfinite(rates) | (rates < 0)
    if bad.any():
        e = int(np.flatnonzero(bad)[0])
        graph = policy.graph
        raise BridgeSimulationError(
            f"Policy returned rate {rates[e]} at step {k} on edge "
            f"{graph.src[e]} -> {graph.dst[e]}"
        )
    return rates


def jump_probability_table(
    policy: Policy, steps: int, dt: float
) -> T.Tuple[np.ndarray, int]:
    """(steps, E) jump probabilities of the Euler chain and the clamp count."""
    graph = policy.graph
    table = np.empty((steps, graph.edge_count))
    clamps = 0
    for k in range(steps):
        probs = _checked_rates(policy, k) * dt
        totals = np.bincount(graph.src, weights=probs, minlength=graph.node_count)
        over = totals > 1.0
        if over.any():
            clamps += int(over.sum())
            scale = np.where(over, 1.0 / np.where(over, totals, 1.0), 1.0)
            probs = probs * scale[graph.src]
        table[k] = probs
    if clamps:
        logger.debug("Clamped %d (step, node) jump distributions", clamps)
    return table, clamps


@dataclass
class RolloutBatch:
    trajectories: np.ndarray  # (B, K+1) node ids
    direction: str
    K: int
    dt: float
    seed: int
    graph: DirectedGraph = field(repr=False)
    clamp_count: int = 0
    saturation_count: int = 0

    @property
    def size(self) -> int:
        return int(self.trajectories.shape[0])

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    def empirical_marginals(self) -> np.ndarray:
        return occupancy(self).marginals

    def check_topology(self) -> None:
        "Raise if any consecutive pair of a trajectory is neither a stay nor an edge"
        a = self.trajectories[:, :-1]
        b = self.trajectories[:, 1:]
        moved = a != b
        edges = self.graph.edge_indices(a[moved], b[moved])
        if (edges < 0).any():
            i = int(np.flatnonzero(edges < 0)[0])
            raise BridgeSimulationError(
                f"Trajectory jumped {a[moved][i]} -> {b[moved][i]}, which is not an edge"
            )


def rollout(
    policy: Policy,
    start,
    batch_size: int,
    K: int,
    dt: T.Optional[float] = None,
    seed: int = 0,
    workers: int = 1,
    direction: str = FORWARD,
) -> RolloutBatch:
    """Sample ``batch_size`` trajectories of the Euler chain under ``policy``.

    Trajectories are simulated in fixed blocks, each with its own random
    stream keyed by (seed, block index), so the batch does not depend on
    ``workers``.
    """
    if batch_size < 1:
        raise BridgeValidationError(f"Batch size must be at least 1, not {batch_size}")
    dt = dt if dt is not None else 1.0 / K
    graph = policy.graph
    start = np.asarray(start, dtype=float)
    if start.shape[0] != graph.node_count or start.sum() <= 0:
        raise BridgeValidationError("Start marginal does not match the rollout graph")

    saturated_before = int(getattr(policy, "saturation_count", 0))
    probs, clamps = jump_probability_table(policy, K, dt)
    order, ptr = graph.out_order, graph.out_ptr
    cumulative = np.zeros((K, graph.edge_count + 1))
    np.cumsum(probs[:, order], axis=1, out=cumulative[:, 1:])
    totals = cumulative[:, ptr[1:]] - cumulative[:, ptr[:-1]]
    start_cdf = np.cumsum(start) / start.sum()
    last_slot = np.maximum(ptr[1:] - 1, ptr[:-1])

    trajectories = np.empty((batch_size, K + 1), dtype=np.int64)

    def run_block(block):
        index, a, b = block
        uniforms = generator_for(seed, index).random((b - a, K + 1))
        x = np.searchsorted(start_cdf, uniforms[:, 0], side="right")
        x = np.minimum(x, graph.node_count - 1)
        trajectories[a:b, 0] = x
        for k in range(K):
            u = uniforms[:, k + 1]
            if graph.edge_count:
                jump = u < totals[k, x]
                slot = np.searchsorted(
                    cumulative[k], cumulative[k, ptr[x]] + u, side="right"
                ) - 1
                slot = np.clip(slot, ptr[x], last_slot[x])
                slot = np.minimum(slot, graph.edge_count - 1)
                x = np.where(jump, graph.dst[order[slot]], x)
            trajectories[a:b, k + 1] = x

    work = blocks(batch_size)
    if workers > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_block, work))
    else:
        for block in work:
            run_block(block)

    return RolloutBatch(
        trajectories=trajectories,
        direction=direction,
        K=K,
        dt=dt,
        seed=seed,
        graph=graph,
        clamp_count=clamps,
        saturation_count=int(getattr(policy, "saturation_count", 0))
        - saturated_before,
    )


def propagate_marginals(
    policy: T.Union[Policy, RateGenerator], mu, K: int, dt: T.Optional[float] = None
) -> np.ndarray:
    """Explicit Euler solution of the continuity equation, (K+1, N).

    Negative mass beyond the drift tolerance means ``dt`` is too large for
    the rates; smaller drift is clipped and the marginal renormalized.
    """
    policy = as_policy(policy)
    dt = dt if dt is not None else 1.0 / K
    graph = policy.graph
    p = np.empty((K + 1, graph.node_count))
    p[0] = np.asarray(mu, dtype=float)
    for k in range(K):
        flux = _checked_rates(policy, k) * dt * p[k, graph.src]
        nxt = (
            p[k]
            - np.bincount(graph.src, weights=flux, minlength=graph.node_count)
            + np.bincount(graph.dst, weights=flux, minlength=graph.node_count)
        )
        low = nxt.min()
        if low < -DRIFT_TOLERANCE:
            node = int(nxt.argmin())
            raise BridgeStiffnessError(
                f"Mass at node {node} became {low:.3g} at step {k + 1}; "
                f"rates are too large for dt={dt:g}. Use a larger horizon K."
            )
        nxt = np.clip(nxt, 0.0, None)
        p[k + 1] = nxt / nxt.sum()
    return p


@dataclass
class OccupancyField:
    counts: np.ndarray  # (K+1, N)
    excluded: np.ndarray  # (N,) bool
    batch_size: int

    @property
    def marginals(self) -> np.ndarray:
        return self.counts / self.batch_size

    def included_counts(self) -> np.ndarray:
        return self.counts[:, ~self.excluded]


def occupancy(batch: RolloutBatch, exclude: T.Iterable[int] = ()) -> OccupancyField:
    steps = batch.trajectories.shape[1]
    n = batch.node_count
    flat = batch.trajectories + (np.arange(steps, dtype=np.int64) * n)[None, :]
    counts = np.bincount(flat.ravel(), minlength=steps * n).reshape(steps, n)
    excluded = np.zeros(n, dtype=bool)
    excluded[list(exclude)] = True
    return OccupancyField(counts=counts, excluded=excluded, batch_size=batch.size)


def transition_counts(batch: RolloutBatch) -> np.ndarray:
    """(K, E) number of trajectories traversing each edge at each step"""
    graph = batch.graph
    a = batch.trajectories[:, :-1]
    b = batch.trajectories[:, 1:]
    moved = a != b
    steps = np.broadcast_to(np.arange(batch.K), a.shape)[moved]
    edges = graph.edge_indices(a[moved], b[moved])
    if (edges < 0).any():
        raise BridgeSimulationError("Batch contains a jump that is not an edge")
    counts = np.bincount(
        steps * graph.edge_count + edges, minlength=batch.K * graph.edge_count
    )
    return counts.reshape(batch.K, graph.edge_count)


def kl_integrand(u: np.ndarray, r: np.ndarray) -> np.ndarray:
    "u log(u/r) - u + r per edge, with 0 log(0/r) = 0"
    if ((u > 0) & (r <= 0)).any():
        raise AbsoluteContinuityError(
            "Controlled rate is positive on an edge where the reference rate is zero"
        )
    ratio = np.where(u > 0, u / np.where(r > 0, r, 1.0), 1.0)
    return np.where(u > 0, u * np.log(ratio), 0.0) - u + r


def path_kl(
    u: T.Union[Policy, RateGenerator],
    r: T.Union[Policy, RateGenerator],
    mu,
    K: int,
    dt: T.Optional[float] = None,
) -> float:
    """KL(p^u || p^r) of the two jump processes on the time grid."""
    u, r = as_policy(u), as_policy(r)
    dt = dt if dt is not None else 1.0 / K
    graph = u.graph
    p = propagate_marginals(u, mu, K, dt)
    total = 0.0
    for k in range(K):
        try:
            terms = kl_integrand(u.edge_rates(k), r.edge_rates(k))
        except AbsoluteContinuityError as e:
            raise AbsoluteContinuityError(f"{e.message} (step {k})") from e
        per_node = np.bincount(graph.src, weights=terms, minlength=graph.node_count)
        total += dt * float(p[k] @ per_node)
    return max(total, 0.0)
