"""Directed graphs, reference rate generators and problem instances.

Rates follow one convention everywhere in graphbridge: ``r(y, x)`` is the
rate of jumping from ``x`` to ``y``. A generator therefore stores one
nonnegative rate per directed edge ``x -> y``; the diagonal
``r(x, x) = -sum_y r(y, x)`` is never stored, only derived, so every column
of the dense generator sums to zero by construction.
"""
import typing as T
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from graphbridge.exceptions import (
    BridgeStructuralError,
    BridgeValidationError,
)

logger = getLogger(__name__)

MARGINAL_TOLERANCE = 1e-9

RATE_PRESETS = ("uniform", "capacity", "inverse_cost")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class DirectedGraph:
    """A fixed directed graph with dense integer node ids.

    Edges keep the order they were given in. Per-source (``out``) and
    per-target (``in``) indices are CSR-style: ``out_order[out_ptr[x]:out_ptr[x+1]]``
    are the ids of the edges leaving ``x``.
    """

    def __init__(
        self,
        node_count: int,
        edges: T.Sequence[T.Tuple[int, int]],
        capacities: T.Optional[T.Sequence[float]] = None,
        costs: T.Optional[T.Sequence[float]] = None,
        labels: T.Optional[T.Mapping[int, str]] = None,
    ):
        if int(node_count) < 1:
            raise BridgeValidationError(
                f"node_count must be a positive integer, not {node_count}"
            )
        self.node_count = int(node_count)
        pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.src = _frozen(pairs[:, 0].copy())
        self.dst = _frozen(pairs[:, 1].copy())
        self._check_edges()

        self.capacities = self._edge_attribute(capacities, "capacity")
        self.costs = self._edge_attribute(costs, "cost")
        self.labels = dict(labels or {})

        self.out_order, self.out_ptr = self._csr(self.src)
        self.in_order, self.in_ptr = self._csr(self.dst)

        keys = self.src * self.node_count + self.dst
        order = np.argsort(keys, kind="stable")
        self._sorted_keys = _frozen(keys[order])
        self._sorted_edges = _frozen(order)

    def _check_edges(self):
        n = self.node_count
        bad = (self.src < 0) | (self.src >= n) | (self.dst < 0) | (self.dst >= n)
        if bad.any():
            e = int(np.flatnonzero(bad)[0])
            raise BridgeValidationError(
                f"Edge {e} ({self.src[e]} -> {self.dst[e]}) refers to a node outside [0, {n})"
            )
        loops = self.src == self.dst
        if loops.any():
            e = int(np.flatnonzero(loops)[0])
            raise BridgeValidationError(
                f"Edge {e} is a self-loop on node {self.src[e]}; holding is implicit in the rate generator"
            )
        keys = self.src * n + self.dst
        unique, counts = np.unique(keys, return_counts=True)
        if (counts > 1).any():
            key = int(unique[counts > 1][0])
            raise BridgeValidationError(
                f"Duplicate directed edge {key // n} -> {key % n}"
            )

    def _edge_attribute(self, values, name) -> T.Optional[np.ndarray]:
        if values is None:
            return None
        array = np.asarray(values, dtype=float).reshape(-1)
        if array.shape[0] != self.edge_count:
            raise BridgeValidationError(
                f"Expected {self.edge_count} edge {name} values, got {array.shape[0]}"
            )
        bad = ~np.isfinite(array) | (array < 0)
        if bad.any():
            e = int(np.flatnonzero(bad)[0])
            raise BridgeValidationError(
                f"Edge {e} ({self.src[e]} -> {self.dst[e]}) has invalid {name} {array[e]}"
            )
        return _frozen(array)

    def _csr(self, endpoints: np.ndarray) -> T.Tuple[np.ndarray, np.ndarray]:
        order = np.argsort(endpoints, kind="stable")
        counts = np.bincount(endpoints, minlength=self.node_count)
        ptr = np.zeros(self.node_count + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return _frozen(order), _frozen(ptr)

    @property
    def edge_count(self) -> int:
        return int(self.src.shape[0])

    @property
    def edges(self) -> T.List[T.Tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def out_edges(self, x: int) -> np.ndarray:
        return self.out_order[self.out_ptr[x] : self.out_ptr[x + 1]]

    def in_edges(self, x: int) -> np.ndarray:
        return self.in_order[self.in_ptr[x] : self.in_ptr[x + 1]]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.out_ptr)

    def in_degree(self) -> np.ndarray:
        return np.diff(self.in_ptr)

    def edge_indices(self, xs, ys) -> np.ndarray:
        "Vectorized edge lookup; -1 marks pairs that are not edges"
        keys = np.asarray(xs, dtype=np.int64) * self.node_count + np.asarray(
            ys, dtype=np.int64
        )
        if self.edge_count == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self.edge_count - 1)
        found = self._sorted_keys[pos] == keys
        return np.where(found, self._sorted_edges[pos], -1)

    def edge_index(self, x: int, y: int) -> int:
        e = int(self.edge_indices([x], [y])[0])
        if e < 0:
            raise BridgeStructuralError(f"({x} -> {y}) is not an edge of the graph")
        return e

    def has_edge(self, x: int, y: int) -> bool:
        return int(self.edge_indices([x], [y])[0]) >= 0

    def adjacency(self, weights: T.Optional[np.ndarray] = None) -> sparse.csr_matrix:
        "Row = source, column = target"
        data = np.ones(self.edge_count) if weights is None else np.asarray(weights)
        return sparse.csr_matrix(
            (data, (self.src, self.dst)), shape=(self.node_count, self.node_count)
        )

    def reversed(self) -> "DirectedGraph":
        return DirectedGraph(
            self.node_count,
            np.stack([self.dst, self.src], axis=1),
            capacities=self.capacities,
            costs=self.costs,
            labels=self.labels,
        )

    def __eq__(self, other):
        if not isinstance(other, DirectedGraph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and _same_optional(self.capacities, other.capacities)
            and _same_optional(self.costs, other.costs)
        )

    def __repr__(self):
        return f"<DirectedGraph nodes={self.node_count} edges={self.edge_count}>"


def _same_optional(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def reverse_graph(graph: DirectedGraph) -> DirectedGraph:
    "Edge (x, y) becomes (y, x); edge order, capacities and costs are kept"
    return graph.reversed()


class RateGenerator:
    """Sparse reference generator: one rate per edge, constant or per step.

    ``rates`` has shape ``(E,)`` for time-homogeneous dynamics or ``(T, E)``
    for a table indexed by time-grid step.
    """

    def __init__(self, graph: DirectedGraph, rates):
        array = np.asarray(rates, dtype=float)
        if array.ndim not in (1, 2) or array.shape[-1] != graph.edge_count:
            raise BridgeValidationError(
                f"Expected {graph.edge_count} edge rates per step, got shape {array.shape}"
            )
        bad = ~np.isfinite(array) | (array < 0)
        if bad.any():
            where = np.argwhere(bad)[0]
            e = int(where[-1])
            step = f" at step {int(where[0])}" if array.ndim == 2 else ""
            raise BridgeValidationError(
                f"Edge {e} ({graph.src[e]} -> {graph.dst[e]}) has invalid rate "
                f"{array[tuple(where)]}{step}"
            )
        self.graph = graph
        self.rates = _frozen(array.copy())

    @property
    def time_dependent(self) -> bool:
        return self.rates.ndim == 2

    def rates_at(self, k: int) -> np.ndarray:
        if not self.time_dependent:
            return self.rates
        if not 0 <= k < self.rates.shape[0]:
            raise BridgeValidationError(
                f"Rate table has {self.rates.shape[0]} steps; step {k} requested"
            )
        return self.rates[k]

    def rate_table(self, steps: int) -> np.ndarray:
        "Rates for steps 0..steps-1 as a (steps, E) array"
        if self.time_dependent:
            if self.rates.shape[0] < steps:
                raise BridgeValidationError(
                    f"Rate table has {self.rates.shape[0]} steps; {steps} are needed"
                )
            return self.rates[:steps]
        return np.broadcast_to(self.rates, (steps, self.graph.edge_count))

    def out_rate(self, k: int = 0) -> np.ndarray:
        "Total exit rate of each node, i.e. -r(x, x)"
        return np.bincount(
            self.graph.src, weights=self.rates_at(k), minlength=self.graph.node_count
        )

    def in_rate(self, k: int = 0) -> np.ndarray:
        return np.bincount(
            self.graph.dst, weights=self.rates_at(k), minlength=self.graph.node_count
        )

    def rate(self, k: int, x: int, y: int) -> float:
        "r(y, x): the rate from x to y"
        return float(self.rates_at(k)[self.graph.edge_index(x, y)])

    def to_sparse(self, k: int = 0) -> sparse.csc_matrix:
        "Column-convention generator: entry [y, x] is the x -> y rate"
        n = self.graph.node_count
        off = sparse.coo_matrix(
            (self.rates_at(k), (self.graph.dst, self.graph.src)), shape=(n, n)
        )
        return (off - sparse.diags(self.out_rate(k))).tocsc()

    def to_dense(self, k: int = 0) -> np.ndarray:
        return self.to_sparse(k).toarray()

    def reversed(self) -> "RateGenerator":
        return RateGenerator(self.graph.reversed(), self.rates)

    def scaled(self, factor: float) -> "RateGenerator":
        return RateGenerator(self.graph, self.rates * factor)


def build_generator(graph: DirectedGraph, edge_rates) -> RateGenerator:
    return RateGenerator(graph, edge_rates)


def validate_marginal(values, node_count: int, name: str = "marginal") -> np.ndarray:
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.shape[0] != node_count:
        raise BridgeValidationError(
            f"{name} has {array.shape[0]} entries; the graph has {node_count} nodes"
        )
    if not np.isfinite(array).all() or (array < 0).any():
        raise BridgeValidationError(f"{name} has negative or non-finite entries")
    total = array.sum()
    if abs(total - 1.0) > MARGINAL_TOLERANCE:
        raise BridgeValidationError(f"{name} sums to {total!r}, not 1")
    return array


def marginal_from_pairs(
    pairs: T.Iterable[T.Tuple[int, float]], node_count: int, name: str = "marginal"
) -> np.ndarray:
    array = np.zeros(node_count)
    for node, mass in pairs:
        if not 0 <= int(node) < node_count:
            raise BridgeValidationError(f"{name} refers to unknown node {node}")
        array[int(node)] += float(mass)
    return validate_marginal(array, node_count, name)


def point_mass(node: int, node_count: int) -> np.ndarray:
    array = np.zeros(node_count)
    array[node] = 1.0
    return array


def endpoints_from_imbalances(
    imbalances, mode: str = "volume-weighted"
) -> T.Tuple[np.ndarray, np.ndarray]:
    """Source and target marginals from signed node imbalances.

    Supplies (positive) carry the source marginal and demands (negative)
    the target marginal, either uniformly or proportionally to volume.
    """
    values = np.asarray(imbalances, dtype=float)
    supply = np.clip(values, 0, None)
    demand = np.clip(-values, 0, None)
    if not supply.any() and not demand.any():
        raise BridgeValidationError("All node imbalances are zero")
    if not supply.any() or not demand.any():
        raise BridgeValidationError(
            "Imbalances need at least one supply and one demand node"
        )
    if mode in ("volume-weighted", "volume"):
        mu, nu = supply, demand
    elif mode == "uniform":
        mu, nu = (supply > 0).astype(float), (demand > 0).astype(float)
    else:
        raise BridgeValidationError(
            f"Unknown endpoint mode {mode!r}; use 'uniform' or 'volume-weighted'"
        )
    return mu / mu.sum(), nu / nu.sum()


def preset_rates(graph: DirectedGraph, preset: str, scale: float = 1.0) -> np.ndarray:
    """Reference rates for graphs that only carry capacities and costs.

    ``capacity`` and ``inverse_cost`` rates are normalized to mean ``scale``.
    """
    if preset == "uniform":
        return np.full(graph.edge_count, float(scale))
    if preset == "capacity":
        if graph.capacities is None:
            raise BridgeValidationError("The capacity preset needs edge capacities")
        weights = graph.capacities.astype(float)
    elif preset == "inverse_cost":
        if graph.costs is None:
            raise BridgeValidationError("The inverse_cost preset needs edge costs")
        weights = 1.0 / np.maximum(graph.costs, 1e-12)
    else:
        raise BridgeValidationError(
            f"Unknown rate preset {preset!r}; choose from {', '.join(RATE_PRESETS)}"
        )
    mean = weights.mean() if weights.size else 1.0
    return weights * (scale / mean) if mean > 0 else np.zeros_like(weights)


def generator_from_transition_matrix(
    transition, tau: float = 0.1, labels: T.Optional[T.Mapping[int, str]] = None
) -> RateGenerator:
    """Reference rates from a row-stochastic lag-tau transition matrix.

    Every off-diagonal ``T[i, j] > 0`` becomes an edge ``i -> j`` with rate
    ``T[i, j] / tau``.
    """
    matrix = np.asarray(transition, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise BridgeValidationError(f"Transition matrix must be square, not {matrix.shape}")
    if (matrix < 0).any() or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-8):
        raise BridgeValidationError("Transition matrix must be row-stochastic")
    if tau <= 0:
        raise BridgeValidationError(f"Lag time must be positive, not {tau}")
    off = matrix.copy()
    np.fill_diagonal(off, 0.0)
    src, dst = np.nonzero(off)
    graph = DirectedGraph(
        matrix.shape[0], np.stack([src, dst], axis=1), labels=labels
    )
    return RateGenerator(graph, off[src, dst] / tau)


def stationary_distribution(generator: RateGenerator, k: int = 0) -> np.ndarray:
    "Null vector of the column-convention generator, normalized to sum 1"
    dense = generator.to_dense(k)
    n = dense.shape[0]
    system = dense.copy()
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise BridgeValidationError(
            f"Reference dynamics have no unique stationary distribution: {e}"
        ) from e
    pi = np.clip(pi, 0, None)
    return pi / pi.sum()


def basin_marginal(pi, nodes: T.Iterable[int]) -> np.ndarray:
    "pi restricted to ``nodes`` and renormalized"
    pi = np.asarray(pi, dtype=float)
    mask = np.zeros(pi.shape[0], dtype=bool)
    mask[list(nodes)] = True
    restricted = np.where(mask, pi, 0.0)
    total = restricted.sum()
    if total <= 0:
        raise BridgeValidationError("Basin carries no stationary mass")
    return restricted / total


def reachable_within(graph: DirectedGraph, sources, hops: int) -> np.ndarray:
    "Boolean mask of nodes reachable from any source in at most ``hops`` jumps"
    sources = np.asarray(sources)
    if sources.dtype == bool:
        sources = np.flatnonzero(sources)
    sources = sources.astype(np.int64)
    if sources.size == 0:
        return np.zeros(graph.node_count, dtype=bool)
    distances = csgraph.shortest_path(
        graph.adjacency(), directed=True, unweighted=True, indices=sources
    )
    return np.atleast_2d(distances).min(axis=0) <= hops


@dataclass
class ProblemInstance:
    """A graph bridge problem on the normalized horizon [0, 1]."""

    generator: RateGenerator
    mu: np.ndarray
    nu: np.ndarray
    K: int
    cost: T.Any = None  # graphbridge.costs.RunningCostSpec
    seed: int = 0
    name: str = "instance"
    imbalances: T.Optional[np.ndarray] = None
    mass: T.Optional[float] = None  # physical mass M behind mu and nu
    extras: T.Dict[str, T.Any] = field(default_factory=dict)

    def __post_init__(self):
        from graphbridge.costs import RunningCostSpec

        n = self.graph.node_count
        self.mu = validate_marginal(self.mu, n, "mu")
        self.nu = validate_marginal(self.nu, n, "nu")
        if int(self.K) < 1:
            raise BridgeValidationError(f"Horizon K must be at least 1, not {self.K}")
        self.K = int(self.K)
        if self.generator.time_dependent:
            self.generator.rate_table(self.K)
        if self.cost is None:
            self.cost = RunningCostSpec()
        self.cost.validate_for(n)

    @property
    def graph(self) -> DirectedGraph:
        return self.generator.graph

    @property
    def dt(self) -> float:
        return 1.0 / self.K

    @property
    def endpoint_nodes(self) -> np.ndarray:
        return np.flatnonzero((self.mu > 0) | (self.nu > 0))

    def with_changes(self, **changes) -> "ProblemInstance":
        values = dict(
            generator=self.generator,
            mu=self.mu,
            nu=self.nu,
            K=self.K,
            cost=self.cost,
            seed=self.seed,
            name=self.name,
            imbalances=self.imbalances,
            mass=self.mass,
            extras=dict(self.extras),
        )
        values.update(changes)
        return ProblemInstance(**values)

    def unreachable_target_mass(self) -> float:
        "nu mass on nodes that cannot be reached from supp(mu) within K hops"
        reachable = reachable_within(self.graph, np.flatnonzero(self.mu > 0), self.K)
        return float(self.nu[~reachable].sum())
