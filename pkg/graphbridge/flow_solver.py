"""Exact min-cost flow by successive shortest paths.

Masses and costs are converted to integers before solving (``MASS_SCALE``
and ``COST_SCALE`` units per unit), so conservation holds exactly and the
reported integer cost is exact. Fractional supplies are rounded with the
largest-remainder rule, which keeps the scaled imbalances summing to zero.
"""
import heapq
import typing as T
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from graphbridge.exceptions import BridgeInfeasibleError, BridgeValidationError
from graphbridge.graph_core import DirectedGraph

logger = getLogger(__name__)

INFINITY: int = 10**18
MASS_SCALE: int = 10**6
COST_SCALE: int = 10**6
BALANCE_TOLERANCE = 1e-9


@dataclass
class FlowNetwork:
    node_count: int
    src: np.ndarray
    dst: np.ndarray
    capacity: np.ndarray  # may hold np.inf
    cost: np.ndarray
    imbalances: np.ndarray  # supply > 0, demand < 0
    labels: T.Optional[T.List[str]] = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.capacity = np.asarray(self.capacity, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.imbalances = np.asarray(self.imbalances, dtype=float)
        arcs = self.src.shape[0]
        if not (self.dst.shape[0] == self.capacity.shape[0] == self.cost.shape[0] == arcs):
            raise BridgeValidationError("Arc arrays have different lengths")
        if self.imbalances.shape[0] != self.node_count:
            raise BridgeValidationError(
                f"Expected {self.node_count} imbalances, got {self.imbalances.shape[0]}"
            )
        if arcs and (
            self.src.min() < 0
            or self.dst.min() < 0
            or max(self.src.max(), self.dst.max()) >= self.node_count
        ):
            raise BridgeValidationError("Arc endpoint outside the network")
        if np.isnan(self.capacity).any() or (self.capacity < 0).any():
            raise BridgeValidationError("Arc capacities must be nonnegative")
        if not np.isfinite(self.cost).all():
            raise BridgeValidationError("Arc costs must be finite")
        scale = max(1.0, float(np.abs(self.imbalances).sum()))
        if abs(self.imbalances.sum()) > BALANCE_TOLERANCE * scale:
            raise BridgeValidationError(
                f"Node imbalances sum to {self.imbalances.sum()!r}, not 0"
            )

    @classmethod
    def from_arcs(
        cls,
        node_count: int,
        arcs: T.Iterable[T.Tuple[int, int, float, float]],
        imbalances,
    ) -> "FlowNetwork":
        "Build from (src, dst, capacity, cost) tuples"
        rows = list(arcs)
        if rows:
            src, dst, cap, cost = (list(column) for column in zip(*rows))
        else:
            src, dst, cap, cost = [], [], [], []
        return cls(node_count, src, dst, cap, cost, imbalances)

    @property
    def arc_count(self) -> int:
        return int(self.src.shape[0])

    @property
    def total_supply(self) -> float:
        return float(self.imbalances[self.imbalances > 0].sum())


@dataclass
class FlowSolution:
    flow: np.ndarray  # per arc, in network units
    integer_flow: np.ndarray
    cost: float
    integer_cost: int  # in MASS_SCALE * COST_SCALE units
    potentials: np.ndarray
    mass_scale: int
    cost_scale: int
    augmentations: int = 0
    certificate: bool = field(default=False)


def largest_remainder(values, total: int) -> np.ndarray:
    """Integers with the given total, each the floor or ceiling of ``values``"""
    values = np.asarray(values, dtype=float)
    floors = np.floor(values).astype(np.int64)
    missing = int(total - floors.sum())
    if missing > 0:
        order = np.argsort(-(values - floors), kind="stable")
        floors[order[:missing]] += 1
    elif missing < 0:
        order = np.argsort(values - floors, kind="stable")
        floors[order[:-missing]] -= 1
    return floors


def scaled_imbalances(imbalances, mass_scale: int) -> np.ndarray:
    values = np.asarray(imbalances, dtype=float) * mass_scale
    supply = np.clip(values, 0, None)
    demand = np.clip(-values, 0, None)
    total = int(round(supply.sum()))
    return largest_remainder(supply, total) - largest_remainder(demand, total)


def _integer_capacities(capacity, mass_scale) -> T.List[int]:
    return [
        INFINITY if not np.isfinite(c) else int(np.floor(c * mass_scale + 1e-9))
        for c in capacity
    ]


class _Residual:
    "Paired residual arcs; arc ``2i`` is arc i forward and ``2i + 1`` its reverse"

    def __init__(self, node_count: int):
        self.node_count = node_count
        self.head: T.List[int] = []
        self.residual: T.List[int] = []
        self.cost: T.List[int] = []
        self.adjacent: T.List[T.List[int]] = [[] for _ in range(node_count)]

    def add(self, src: int, dst: int, cap: int, cost: int) -> int:
        index = len(self.head)
        self.head += [dst, src]
        self.residual += [cap, 0]
        self.cost += [cost, -cost]
        self.adjacent[src].append(index)
        self.adjacent[dst].append(index + 1)
        return index

    def tail(self, arc: int) -> int:
        return self.head[arc ^ 1]

    def initial_potentials(self) -> T.List[int]:
        "Bellman-Ford from a virtual root joined to every node at cost 0"
        potentials = [0] * self.node_count
        for _ in range(self.node_count):
            changed = False
            for arc in range(len(self.head)):
                if self.residual[arc] > 0:
                    candidate = potentials[self.tail(arc)] + self.cost[arc]
                    if candidate < potentials[self.head[arc]]:
                        potentials[self.head[arc]] = candidate
                        changed = True
            if not changed:
                return potentials
        raise BridgeValidationError("Network contains a negative-cost cycle")

    def shortest_paths(self, source, sink, potentials):
        dist = [INFINITY] * self.node_count
        parent = [-1] * self.node_count
        done = [False] * self.node_count
        dist[source] = 0
        heap = [(0, source)]
        while heap:
            d, x = heapq.heappop(heap)
            if done[x]:
                continue
            done[x] = True
            if x == sink:
                break
            for arc in self.adjacent[x]:
                if self.residual[arc] <= 0:
                    continue
                y = self.head[arc]
                candidate = d + self.cost[arc] + potentials[x] - potentials[y]
                if candidate < dist[y]:
                    dist[y] = candidate
                    parent[y] = arc
                    heapq.heappush(heap, (candidate, y))
        return dist, parent

    def reachable(self, source) -> T.Set[int]:
        seen = {source}
        stack = [source]
        while stack:
            x = stack.pop()
            for arc in self.adjacent[x]:
                y = self.head[arc]
                if self.residual[arc] > 0 and y not in seen:
                    seen.add(y)
                    stack.append(y)
        return seen


def min_cost_flow(
    network: FlowNetwork,
    mass_scale: int = MASS_SCALE,
    cost_scale: int = COST_SCALE,
) -> FlowSolution:
    """Minimum-cost flow meeting every imbalance.

    Raises ``BridgeInfeasibleError`` naming a set of nodes whose supply
    cannot leave it under the capacities.
    """
    n = network.node_count
    source, sink = n, n + 1
    residual = _Residual(n + 2)
    caps = _integer_capacities(network.capacity, mass_scale)
    costs = [int(round(c * cost_scale)) for c in network.cost]
    for i in range(network.arc_count):
        residual.add(int(network.src[i]), int(network.dst[i]), caps[i], costs[i])
    balances = scaled_imbalances(network.imbalances, mass_scale)
    for x, b in enumerate(balances.tolist()):
        if b > 0:
            residual.add(source, x, b, 0)
        elif b < 0:
            residual.add(x, sink, -b, 0)
    required = int(balances[balances > 0].sum())

    potentials = (
        residual.initial_potentials() if any(c < 0 for c in costs) else [0] * (n + 2)
    )
    pushed = 0
    augmentations = 0
    while pushed < required:
        dist, parent = residual.shortest_paths(source, sink, potentials)
        if dist[sink] >= INFINITY:
            _raise_infeasible(network, residual, source, required - pushed, mass_scale)
        horizon = dist[sink]
        for x in range(n + 2):
            potentials[x] += min(dist[x], horizon)

        amount = required - pushed
        x = sink
        while x != source:
            arc = parent[x]
            amount = min(amount, residual.residual[arc])
            x = residual.tail(arc)
        x = sink
        while x != source:
            arc = parent[x]
            residual.residual[arc] -= amount
            residual.residual[arc ^ 1] += amount
            x = residual.tail(arc)
        pushed += amount
        augmentations += 1

    logger.debug(
        "Min-cost flow: %d arcs, %d augmentations", network.arc_count, augmentations
    )
    integer_flow = np.array(
        [residual.residual[2 * i + 1] for i in range(network.arc_count)], dtype=np.int64
    )
    flow = integer_flow / mass_scale
    solution = FlowSolution(
        flow=flow,
        integer_flow=integer_flow,
        cost=float(flow @ network.cost) if network.arc_count else 0.0,
        integer_cost=int(sum(f * c for f, c in zip(integer_flow.tolist(), costs))),
        potentials=np.array(potentials[:n], dtype=np.int64),
        mass_scale=mass_scale,
        cost_scale=cost_scale,
        augmentations=augmentations,
    )
    solution.certificate = verify_certificate(network, solution)
    return solution


def _raise_infeasible(network, residual, source, missing, mass_scale):
    cut = sorted(x for x in residual.reachable(source) if x < network.node_count)
    inside = np.zeros(network.node_count, dtype=bool)
    inside[cut] = True
    leaving = inside[network.src] & ~inside[network.dst]
    capacity = float(network.capacity[leaving].sum())
    supply = float(network.imbalances[cut].sum()) if cut else 0.0
    shown = ", ".join(str(x) for x in cut[:20]) + (" ..." if len(cut) > 20 else "")
    raise BridgeInfeasibleError(
        f"Flow is infeasible: {missing / mass_scale:g} units cannot be routed. "
        f"The cut {{{shown}}} has net supply {supply:g} but only {capacity:g} "
        "capacity leaving it",
        cut=cut,
    )


def verify_certificate(network: FlowNetwork, solution: FlowSolution) -> bool:
    """True when no residual arc has negative reduced cost.

    Checked in the solver's integer units against the returned potentials;
    together with feasibility this proves optimality.
    """
    if network.arc_count == 0:
        return True
    caps = np.array(_integer_capacities(network.capacity, solution.mass_scale))
    costs = np.round(network.cost * solution.cost_scale).astype(np.int64)
    pi = solution.potentials
    reduced = costs + pi[network.src] - pi[network.dst]
    flow = solution.integer_flow
    forward_open = flow < caps
    backward_open = flow > 0
    return bool(
        (reduced[forward_open] >= 0).all() and (reduced[backward_open] <= 0).all()
    )


@dataclass
class TimeExpandedNetwork:
    network: FlowNetwork
    graph: DirectedGraph
    K: int
    mass: float

    def layer_node(self, t: int, x: int) -> int:
        return t * self.graph.node_count + x

    def transport_arc(self, t: int, e: int) -> int:
        return t * (self.graph.edge_count + self.graph.node_count) + e

    def holdover_arc(self, t: int, x: int) -> int:
        return t * (self.graph.edge_count + self.graph.node_count) + self.graph.edge_count + x

    def split(self, flow: np.ndarray) -> T.Tuple[np.ndarray, np.ndarray]:
        "Per-step (K, E) transport flows and (K, N) holdover flows"
        E, N = self.graph.edge_count, self.graph.node_count
        per_step = np.asarray(flow).reshape(self.K, E + N)
        return per_step[:, :E], per_step[:, E:]


def build_time_expanded(
    graph: DirectedGraph, capacities, costs, mu, nu, K: int, mass: float
) -> TimeExpandedNetwork:
    """Layered copy of ``graph`` with one layer per grid time.

    Every step carries one transport arc per edge (edge capacity and cost)
    followed by one zero-cost holdover arc per node with capacity ``mass``.
    Layer 0 supplies ``mass * mu`` and layer K demands ``mass * nu``.
    """
    if K < 1:
        raise BridgeValidationError(f"Horizon K must be at least 1, not {K}")
    N, E = graph.node_count, graph.edge_count
    capacities = (
        np.full(E, np.inf) if capacities is None else np.asarray(capacities, dtype=float)
    )
    costs = np.zeros(E) if costs is None else np.asarray(costs, dtype=float)
    steps = np.arange(K)
    transport_src = (steps[:, None] * N + graph.src[None, :])
    transport_dst = ((steps[:, None] + 1) * N + graph.dst[None, :])
    hold_src = steps[:, None] * N + np.arange(N)[None, :]
    hold_dst = hold_src + N
    src = np.concatenate([transport_src, hold_src], axis=1).ravel()
    dst = np.concatenate([transport_dst, hold_dst], axis=1).ravel()
    cap = np.concatenate(
        [np.broadcast_to(capacities, (K, E)), np.full((K, N), float(mass))], axis=1
    ).ravel()
    cost = np.concatenate(
        [np.broadcast_to(costs, (K, E)), np.zeros((K, N))], axis=1
    ).ravel()
    imbalances = np.zeros((K + 1) * N)
    imbalances[:N] = mass * np.asarray(mu, dtype=float)
    imbalances[K * N :] -= mass * np.asarray(nu, dtype=float)
    network = FlowNetwork((K + 1) * N, src, dst, cap, cost, imbalances)
    return TimeExpandedNetwork(network=network, graph=graph, K=K, mass=float(mass))
