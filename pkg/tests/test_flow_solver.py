from itertools import product

import numpy as np
import pytest
from scipy.optimize import linprog

from graphbridge.exceptions import BridgeInfeasibleError, BridgeValidationError
from graphbridge.flow_solver import (
    FlowNetwork,
    build_time_expanded,
    largest_remainder,
    min_cost_flow,
    scaled_imbalances,
    verify_certificate,
)
from graphbridge.graph_core import DirectedGraph


def linprog_cost(network: FlowNetwork) -> float:
    incidence = np.zeros((network.node_count, network.arc_count))
    incidence[network.src, np.arange(network.arc_count)] = 1.0
    incidence[network.dst, np.arange(network.arc_count)] -= 1.0
    bounds = [(0, None if np.isinf(c) else c) for c in network.capacity]
    result = linprog(
        network.cost, A_eq=incidence, b_eq=network.imbalances, bounds=bounds
    )
    assert result.status == 0
    return result.fun


def brute_force_cost(network: FlowNetwork) -> float:
    "Cheapest integer flow, by enumeration; integer data has an integral LP optimum"
    best = np.inf
    ranges = [range(int(c) + 1) for c in network.capacity]
    for flow in product(*ranges):
        flow = np.array(flow, dtype=float)
        net = np.zeros(network.node_count)
        np.add.at(net, network.src, flow)
        np.subtract.at(net, network.dst, flow)
        if np.array_equal(net, network.imbalances):
            best = min(best, float(flow @ network.cost))
    return best


def random_network(rng, n=6):
    pairs = {(x, (x + 1) % n) for x in range(n)}
    while len(pairs) < 2 * n:
        x, y = rng.integers(n, size=2)
        if x != y:
            pairs.add((int(x), int(y)))
    arcs = [
        (x, y, float(rng.integers(2, 6)), float(rng.integers(1, 10)))
        for x, y in sorted(pairs)
    ]
    imbalances = np.zeros(n)
    imbalances[0], imbalances[n // 2] = 1.5, -1.5
    return FlowNetwork.from_arcs(n, arcs, imbalances)


class TestMinCostFlow:
    def test_matches_linprog(self, rng):
        for _ in range(20):
            network = random_network(rng)
            solution = min_cost_flow(network)
            assert solution.cost == pytest.approx(linprog_cost(network), abs=1e-6)
            assert solution.certificate

    def test_matches_enumeration_on_small_networks(self, rng):
        pairs = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 1)]
        for _ in range(10):
            # every cut between 0 and 3 carries at least 2 units
            arcs = [
                (x, y, float(rng.integers(1, 3)), float(rng.integers(1, 8)))
                for x, y in pairs
            ]
            network = FlowNetwork.from_arcs(4, arcs, [2.0, 0.0, 0.0, -2.0])
            solution = min_cost_flow(network)
            assert solution.cost == pytest.approx(brute_force_cost(network), abs=1e-9)

    def test_conservation_is_exact(self, rng):
        network = random_network(rng)
        solution = min_cost_flow(network)
        net = np.zeros(network.node_count, dtype=np.int64)
        np.add.at(net, network.src, solution.integer_flow)
        np.subtract.at(net, network.dst, solution.integer_flow)
        assert net.tolist() == scaled_imbalances(
            network.imbalances, solution.mass_scale
        ).tolist()

    def test_negative_costs(self):
        network = FlowNetwork.from_arcs(
            3, [(0, 1, 1.0, -2.0), (1, 2, 1.0, 1.0), (0, 2, 1.0, 0.0)], [1, 0, -1]
        )
        solution = min_cost_flow(network)
        assert solution.cost == pytest.approx(-1.0)
        assert solution.flow.tolist() == [1.0, 1.0, 0.0]

    def test_negative_cycle(self):
        network = FlowNetwork.from_arcs(
            2, [(0, 1, 1.0, -1.0), (1, 0, 1.0, -1.0)], [0, 0]
        )
        with pytest.raises(BridgeValidationError, match="negative-cost cycle"):
            min_cost_flow(network)

    def test_infeasible_names_a_cut(self):
        network = FlowNetwork.from_arcs(
            3, [(0, 1, 1.0, 1.0), (1, 2, 0.5, 1.0)], [1, 0, -1]
        )
        with pytest.raises(BridgeInfeasibleError, match="0.5 units") as e:
            min_cost_flow(network)
        assert e.value.cut == [0, 1]

    def test_certificate_rejects_a_bad_flow(self):
        network = FlowNetwork.from_arcs(
            3, [(0, 1, 1.0, 5.0), (0, 2, 1.0, 1.0), (2, 1, 1.0, 1.0)], [1, -1, 0]
        )
        solution = min_cost_flow(network)
        assert solution.cost == pytest.approx(2.0)
        solution.integer_flow = np.array([solution.mass_scale, 0, 0])
        assert not verify_certificate(network, solution)

    @pytest.mark.parametrize(
        "arcs,imbalances",
        [
            ([(0, 3, 1.0, 1.0)], [1, -1]),
            ([(0, 1, -1.0, 1.0)], [1, -1]),
            ([(0, 1, 1.0, np.inf)], [1, -1]),
            ([(0, 1, 1.0, 1.0)], [1, -0.5]),
        ],
    )
    def test_invalid_networks(self, arcs, imbalances):
        with pytest.raises(BridgeValidationError):
            FlowNetwork.from_arcs(2, arcs, imbalances)


class TestRounding:
    def test_largest_remainder(self):
        assert largest_remainder([0.4, 0.4, 0.2], 1).tolist() == [1, 0, 0]
        assert largest_remainder([1.5, 1.5], 3).tolist() == [2, 1]

    def test_scaled_imbalances_sum_to_zero(self):
        scaled = scaled_imbalances([1 / 3, 1 / 3, 1 / 3, -1.0], 10)
        assert scaled.sum() == 0
        assert sorted(scaled[:3].tolist()) == [3, 3, 4]


class TestTimeExpanded:
    def test_layout(self, chain):
        expanded = build_time_expanded(
            chain.graph, None, None, chain.mu, chain.nu, 3, mass=2.0
        )
        network = expanded.network
        E, N = chain.graph.edge_count, chain.graph.node_count
        assert network.node_count == 4 * N
        assert network.arc_count == 3 * (E + N)
        e = chain.graph.edge_index(1, 2)
        arc = expanded.transport_arc(1, e)
        assert network.src[arc] == expanded.layer_node(1, 1)
        assert network.dst[arc] == expanded.layer_node(2, 2)
        hold = expanded.holdover_arc(2, 0)
        assert network.capacity[hold] == 2.0
        assert network.imbalances.sum() == 0

    def test_flow_reaches_the_target(self, chain):
        expanded = build_time_expanded(
            chain.graph, np.ones(4), np.ones(4), chain.mu, chain.nu, 3, mass=1.0
        )
        solution = min_cost_flow(expanded.network)
        transport, holdover = expanded.split(solution.flow)
        assert transport.shape == (3, 4) and holdover.shape == (3, 3)
        assert solution.cost == pytest.approx(2.0)

    def test_capacity_too_small(self, chain):
        expanded = build_time_expanded(
            chain.graph, np.full(4, 0.5), np.ones(4), chain.mu, chain.nu, 2, mass=1.0
        )
        with pytest.raises(BridgeInfeasibleError):
            min_cost_flow(expanded.network)

    def test_bad_horizon(self, chain):
        with pytest.raises(BridgeValidationError):
            build_time_expanded(chain.graph, None, None, chain.mu, chain.nu, 0, 1.0)
