"""Rollout-based evaluation.

All metrics are pure functions of a batch and instance data; every method,
learned or baseline, is scored from sampled trajectories the same way.
"""
import typing as T
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csgraph

from graphbridge.ctmc_engine import (
    OccupancyField,
    RolloutBatch,
    occupancy,
    transition_counts,
)

TIME_NORMALIZATION = "per_step"


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def terminal_tv(batch: RolloutBatch, nu) -> float:
    terminal = np.bincount(batch.trajectories[:, -1], minlength=batch.node_count)
    return total_variation(terminal / batch.size, nu)


@dataclass
class CongestionStats:
    mean_top_k: float
    peak: int
    top_k: int
    top_nodes: T.List[int] = field(default_factory=list)
    time_normalization: str = TIME_NORMALIZATION


def congestion_stats(
    occ: OccupancyField, top_k: int = 100, exclude: T.Iterable[int] = None
) -> CongestionStats:
    """Mean occupancy of the top-k busiest nodes per time slice, and the peak.

    Endpoint nodes flagged in the occupancy field (or given in ``exclude``)
    are skipped.
    """
    excluded = occ.excluded.copy()
    if exclude is not None:
        excluded[list(exclude)] = True
    included = np.flatnonzero(~excluded)
    if included.size == 0:
        return CongestionStats(mean_top_k=0.0, peak=0, top_k=0)
    k = max(1, min(int(top_k), included.size))
    counts = occ.counts[:, included]
    totals = counts.sum(axis=0)
    best = np.argsort(-totals, kind="stable")[:k]
    mean = float(counts[:, best].sum()) / (counts.shape[0] * k)
    return CongestionStats(
        mean_top_k=mean,
        peak=int(counts.max()),
        top_k=k,
        top_nodes=included[best].tolist(),
    )


def capacity_violation(batch: RolloutBatch, caps, mass: float = None) -> float:
    """V_max: the largest per-step edge load relative to capacity.

    Capacities live in flow units; with a physical mass M they are compared
    in count space as cap * B / M. Without a mass, counts are compared
    with capacities directly.
    """
    if batch.graph.edge_count == 0 or batch.K == 0:
        return 0.0
    flows = transition_counts(batch).astype(float)
    caps = np.asarray(caps, dtype=float)
    scaled = caps * (batch.size / mass) if mass else caps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(
            scaled > 0, flows / np.where(scaled > 0, scaled, 1.0), np.where(flows > 0, np.inf, 0.0)
        )
    return float(ratio.max())


def fold_rate(batch: RolloutBatch, target_set: T.Iterable[int]) -> float:
    targets = np.zeros(batch.node_count, dtype=bool)
    targets[list(target_set)] = True
    return float(targets[batch.trajectories[:, -1]].mean())


@dataclass
class BarrierStats:
    median: T.Optional[float]
    mean: T.Optional[float]
    maximum: T.Optional[float]
    trajectories: int


def trajectory_barriers(batch: RolloutBatch, energies, endpoint_nodes) -> np.ndarray:
    F = np.asarray(energies, dtype=float)
    floor = F[np.asarray(list(endpoint_nodes), dtype=np.int64)].min()
    return F[batch.trajectories].max(axis=1) - floor


def energy_barrier(
    batch: RolloutBatch, energies, endpoint_nodes, target_set=None
) -> BarrierStats:
    """Barrier statistics over trajectories that end in ``target_set``.

    Each trajectory's barrier is its highest energy minus the lowest energy
    over the endpoint supports. All trajectories count when no target set
    is given.
    """
    barriers = trajectory_barriers(batch, energies, endpoint_nodes)
    if target_set is not None:
        targets = np.zeros(batch.node_count, dtype=bool)
        targets[list(target_set)] = True
        barriers = barriers[targets[batch.trajectories[:, -1]]]
    if barriers.size == 0:
        return BarrierStats(median=None, mean=None, maximum=None, trajectories=0)
    return BarrierStats(
        median=float(np.median(barriers)),
        mean=float(barriers.mean()),
        maximum=float(barriers.max()),
        trajectories=int(barriers.size),
    )


@dataclass
class OverheadStats:
    overheads: np.ndarray
    unreachable: int
    degenerate: int
    histogram_counts: T.List[int]
    histogram_edges: T.List[float]

    @property
    def median(self) -> T.Optional[float]:
        return float(np.median(self.overheads)) if self.overheads.size else None

    @property
    def mean(self) -> T.Optional[float]:
        return float(self.overheads.mean()) if self.overheads.size else None


def path_overhead(batch: RolloutBatch, costs=None, bins: int = 20) -> OverheadStats:
    """Relative excess of each realized path over the shortest X_0 -> X_K path.

    Trajectories whose end is unreachable from their start are excluded and
    counted, as are those with a zero-length shortest path but a positive
    realized length.
    """
    graph = batch.graph
    weights = np.ones(graph.edge_count) if costs is None else np.asarray(costs, dtype=float)
    X = batch.trajectories
    a, b = X[:, :-1], X[:, 1:]
    moved = a != b
    edges = graph.edge_indices(a[moved], b[moved])
    per_move = np.zeros(a.shape)
    per_move[moved] = weights[edges]
    realized = per_move.sum(axis=1)

    starts, inverse = np.unique(X[:, 0], return_inverse=True)
    search_weights = np.maximum(weights, 1e-12)
    distances = csgraph.dijkstra(
        graph.adjacency(search_weights), directed=True, indices=starts
    )
    shortest = np.atleast_2d(distances)[inverse, X[:, -1]]
    shortest = np.where(shortest < 1e-9, 0.0, shortest)

    unreachable = ~np.isfinite(shortest)
    zero = (shortest == 0) & ~unreachable
    degenerate = zero & (realized > 0)
    usable = ~unreachable & ~degenerate
    overheads = np.zeros(X.shape[0])
    positive = usable & ~zero
    overheads[positive] = (realized[positive] - shortest[positive]) / shortest[positive]
    overheads = overheads[usable]
    if overheads.size:
        counts, edges_ = np.histogram(overheads, bins=bins)
    else:
        counts, edges_ = np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
    return OverheadStats(
        overheads=overheads,
        unreachable=int(unreachable.sum()),
        degenerate=int(degenerate.sum()),
        histogram_counts=counts.tolist(),
        histogram_edges=edges_.tolist(),
    )


@dataclass
class MetricsReport:
    method: str
    batch_size: int
    K: int
    terminal_tv: float
    mean_top_k: float
    peak_occupancy: int
    top_k: int
    time_normalization: str
    v_max: T.Optional[float] = None
    fold_rate: T.Optional[float] = None
    barrier_median: T.Optional[float] = None
    barrier_mean: T.Optional[float] = None
    barrier_max: T.Optional[float] = None
    overhead_median: T.Optional[float] = None
    overhead_mean: T.Optional[float] = None
    overhead_unreachable: T.Optional[int] = None
    clamp_count: int = 0
    saturation_count: int = 0
    extras: T.Dict[str, T.Any] = field(default_factory=dict)

    def as_dict(self) -> dict:
        values = asdict(self)
        extras = values.pop("extras")
        values.update(extras)
        return values


def evaluate_batch(
    batch: RolloutBatch,
    instance,
    *,
    method: str = "gsb",
    top_k: int = 100,
    target_set: T.Iterable[int] = None,
    energies=None,
    mass: float = None,
    with_overhead: bool = False,
) -> T.Tuple[MetricsReport, T.Dict[str, T.Any]]:
    """Full metric suite for one batch; returns the report and plot data."""
    graph = instance.graph
    endpoints = instance.endpoint_nodes
    occ = occupancy(batch, exclude=endpoints)
    congestion = congestion_stats(occ, top_k=top_k)
    report = MetricsReport(
        method=method,
        batch_size=batch.size,
        K=batch.K,
        terminal_tv=terminal_tv(batch, instance.nu),
        mean_top_k=congestion.mean_top_k,
        peak_occupancy=congestion.peak,
        top_k=congestion.top_k,
        time_normalization=congestion.time_normalization,
        clamp_count=batch.clamp_count,
        saturation_count=batch.saturation_count,
    )
    plots: T.Dict[str, T.Any] = {
        "occupancy": [
            {"node": int(node), "total_occupancy": int(occ.counts[:, node].sum())}
            for node in congestion.top_nodes
        ]
    }
    if graph.capacities is not None:
        report.v_max = capacity_violation(
            batch, graph.capacities, mass if mass is not None else instance.mass
        )
    if target_set is not None:
        target_set = list(target_set)
        report.fold_rate = fold_rate(batch, target_set)
    if energies is not None:
        barrier = energy_barrier(batch, energies, endpoints, target_set)
        report.barrier_median = barrier.median
        report.barrier_mean = barrier.mean
        report.barrier_max = barrier.maximum
    if with_overhead:
        overhead = path_overhead(batch, graph.costs)
        report.overhead_median = overhead.median
        report.overhead_mean = overhead.mean
        report.overhead_unreachable = overhead.unreachable
        plots["overhead_histogram"] = [
            {"left": left, "right": right, "count": count}
            for left, right, count in zip(
                overhead.histogram_edges[:-1],
                overhead.histogram_edges[1:],
                overhead.histogram_counts,
            )
        ]
    return report, plots
