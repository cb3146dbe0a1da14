"""Bundled problem instances.

``load_fixture(name, **options)`` builds one of the named instances below;
options are the keyword arguments of the matching builder.
"""
import typing as T
from pathlib import Path

import numpy as np

from graphbridge.assignment import encode_assignment, random_assignment_instance
from graphbridge.costs import RunningCostSpec
from graphbridge.dimacs import load_dimacs_mcf
from graphbridge.exceptions import BridgeValidationError
from graphbridge.graph_core import (
    DirectedGraph,
    ProblemInstance,
    RateGenerator,
    basin_marginal,
    point_mass,
    stationary_distribution,
)

DATA_DIR = Path(__file__).parent / "data"
TINY_DIMACS = DATA_DIR / "tiny_roadflow.min"


def _two_way(pairs: T.Iterable[T.Tuple[int, int]]) -> T.List[T.Tuple[int, int]]:
    edges = []
    for a, b in pairs:
        edges += [(a, b), (b, a)]
    return edges


def single_node(K: int = 1) -> ProblemInstance:
    graph = DirectedGraph(1, [])
    return ProblemInstance(
        generator=RateGenerator(graph, np.zeros(0)),
        mu=[1.0],
        nu=[1.0],
        K=K,
        name="single_node",
    )


def tiny_dimacs(
    K: int = 100,
    endpoint_mode: str = "volume-weighted",
    rate_preset: str = "capacity",
    rate_scale: float = 3.0,
    seed: int = 0,
) -> ProblemInstance:
    return load_dimacs_mcf(TINY_DIMACS).to_instance(
        K,
        endpoint_mode=endpoint_mode,
        rate_preset=rate_preset,
        rate_scale=rate_scale,
        seed=seed,
    )


def three_node_chain(K: int = 32, rate: float = 1.0) -> ProblemInstance:
    "0 <-> 1 <-> 2 at a constant rate, from node 0 to node 2"
    graph = DirectedGraph(3, _two_way([(0, 1), (1, 2)]))
    return ProblemInstance(
        generator=RateGenerator(graph, np.full(graph.edge_count, float(rate))),
        mu=point_mass(0, 3),
        nu=point_mass(2, 3),
        K=K,
        name="three_node_chain",
    )


CLUSTER_SIZE = 20
BOTTLENECK_LENGTH = 4
DETOUR_LENGTH = 16
BOTTLENECK_MASS = 200.0


def bottleneck(
    K: int = 100,
    rate: float = 4.0,
    congestion_weight: float = 0.0,
    b_scale: float = 1.0,
) -> ProblemInstance:
    """Two clusters joined by a short cheap path and a long detour.

    Clusters are rings of ``CLUSTER_SIZE`` nodes with chords five apart.
    The bottleneck path (capacity 2) joins node 0 to node 20; the detour
    (capacity 10) joins node 10 to node 30. Capacities are per step for a
    physical mass of 200. mu and nu are uniform on the first and second
    cluster. Congestion is charged off the clusters only.
    """
    n = CLUSTER_SIZE
    pairs = []
    caps = []
    for offset in (0, n):
        for i in range(n):
            for step in (1, 5):
                if step == 5 and i >= n - step:
                    continue
                pairs.append((offset + i, offset + (i + step) % n))
                caps.append(50.0)
    path_start = 2 * n
    short = [0, *range(path_start, path_start + BOTTLENECK_LENGTH), n]
    detour_start = path_start + BOTTLENECK_LENGTH
    long = [10, *range(detour_start, detour_start + DETOUR_LENGTH), n + 10]
    for route, cap in ((short, 2.0), (long, 10.0)):
        for a, b in zip(route, route[1:]):
            pairs.append((a, b))
            caps.append(cap)
    node_count = detour_start + DETOUR_LENGTH
    edges = _two_way(pairs)
    capacities = np.repeat(caps, 2)
    graph = DirectedGraph(
        node_count,
        edges,
        capacities=capacities,
        costs=np.ones(len(edges)),
        labels={0: "west gate", n: "east gate"},
    )
    mu = np.zeros(node_count)
    mu[:n] = 1.0 / n
    nu = np.zeros(node_count)
    nu[n : 2 * n] = 1.0 / n
    return ProblemInstance(
        generator=RateGenerator(graph, np.full(graph.edge_count, float(rate))),
        mu=mu,
        nu=nu,
        K=K,
        cost=RunningCostSpec.congestion(congestion_weight, range(2 * n), b_scale),
        name="bottleneck",
        mass=BOTTLENECK_MASS,
    )


def double_well_energies(node_count: int = 40, barrier: float = 6.0) -> np.ndarray:
    "F(x) = barrier * (s^2 - 1)^2 with s mapping the wells to +/-1"
    centre = (node_count - 1) / 2
    s = (np.arange(node_count) - centre) / (centre - 8)
    return barrier * (s**2 - 1) ** 2


def double_well(
    K: int = 200,
    node_count: int = 40,
    barrier: float = 6.0,
    base_rate: float = 20.0,
    basin_width: int = 3,
    energy_weight: float = 0.0,
) -> ProblemInstance:
    """Birth-death chain with Metropolis rates on a symmetric double well.

    Mass starts in the stationary law restricted to the left basin and
    must end in the right one. ``energy_weight`` > 0 charges the node
    energy as running cost.
    """
    if node_count < 20:
        raise BridgeValidationError("The double well needs at least 20 nodes")
    energies = double_well_energies(node_count, barrier)
    edges = _two_way((x, x + 1) for x in range(node_count - 1))
    src, dst = np.asarray(edges).T
    rates = base_rate * np.minimum(1.0, np.exp(-(energies[dst] - energies[src])))
    generator = RateGenerator(DirectedGraph(node_count, edges), rates)
    left = int(np.argmin(energies[: node_count // 2]))
    right = node_count // 2 + int(np.argmin(energies[node_count // 2 :]))
    unfolded = list(range(left - basin_width, left + basin_width + 1))
    folded = list(range(right - basin_width, right + basin_width + 1))
    pi = stationary_distribution(generator)
    cost = (
        RunningCostSpec.from_table(energy_weight * energies)
        if energy_weight > 0
        else RunningCostSpec.zero()
    )
    return ProblemInstance(
        generator=generator,
        mu=basin_marginal(pi, unfolded),
        nu=basin_marginal(pi, folded),
        K=K,
        cost=cost,
        name="double_well",
        extras={
            "energies": energies,
            "target_set": folded,
            "unfolded": unfolded,
            "folded": folded,
        },
    )


def assignment(n: int = 5, seed: int = 0, K: int = 8, rate: float = 1.0):
    C, p0, p1 = random_assignment_instance(n, seed)
    return encode_assignment(C, p0, p1, K=K, rate=rate, seed=seed)


FIXTURES: T.Dict[str, T.Callable[..., ProblemInstance]] = {
    "single_node": single_node,
    "tiny_dimacs": tiny_dimacs,
    "three_node_chain": three_node_chain,
    "bottleneck": bottleneck,
    "double_well": double_well,
    "assignment": assignment,
}


def load_fixture(name: str, **options) -> ProblemInstance:
    try:
        builder = FIXTURES[name]
    except KeyError:
        raise BridgeValidationError(
            f"Unknown fixture {name!r}; choose from {', '.join(sorted(FIXTURES))}"
        )
    try:
        return builder(**options)
    except TypeError as e:
        raise BridgeValidationError(f"Bad options for fixture {name!r}: {e}") from e
