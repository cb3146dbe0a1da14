import numpy as np
import pytest

from graphbridge.exceptions import BridgeValidationError
from graphbridge.fixtures import (
    BOTTLENECK_MASS,
    FIXTURES,
    double_well_energies,
    load_fixture,
)


class TestFixtures:
    @pytest.mark.parametrize("name", sorted(FIXTURES))
    def test_every_fixture_is_consistent(self, name):
        instance = load_fixture(name)
        n = instance.graph.node_count
        assert instance.mu.shape == (n,) and instance.nu.shape == (n,)
        assert instance.mu.sum() == pytest.approx(1.0)
        assert instance.nu.sum() == pytest.approx(1.0)
        instance.cost.validate_for(n)
        assert instance.unreachable_target_mass() == 0.0

    def test_bottleneck(self):
        instance = load_fixture("bottleneck", congestion_weight=2.0)
        graph = instance.graph
        assert graph.node_count == 60
        assert instance.mass == BOTTLENECK_MASS
        assert graph.capacities[graph.edge_index(0, 40)] == 2.0
        assert graph.capacities[graph.edge_index(10, 44)] == 10.0
        assert instance.cost.weight == 2.0
        assert set(instance.cost.exclude) == set(range(40))
        assert graph.labels[0] == "west gate"

    def test_double_well(self):
        instance = load_fixture("double_well")
        energies = instance.extras["energies"]
        assert np.allclose(energies, energies[::-1])
        assert energies[[8, 31]].tolist() == pytest.approx([0.0, 0.0])
        assert instance.extras["target_set"] == list(range(28, 35))
        assert instance.mu[instance.extras["unfolded"]].sum() == pytest.approx(1.0)

    def test_double_well_energy_cost(self):
        instance = load_fixture("double_well", energy_weight=0.5)
        assert instance.cost.node_table[20] == pytest.approx(
            0.5 * double_well_energies()[20]
        )

    def test_double_well_too_small(self):
        with pytest.raises(BridgeValidationError):
            load_fixture("double_well", node_count=10)

    def test_tiny_dimacs(self):
        instance = load_fixture("tiny_dimacs", K=20)
        assert instance.K == 20
        assert instance.graph.edge_count == 20

    def test_assignment(self):
        instance = load_fixture("assignment", n=3, seed=4)
        assert instance.graph.node_count == 15
        assert instance.extras["assignment"].n == 3

    def test_unknown_fixture(self):
        with pytest.raises(BridgeValidationError, match="choose from"):
            load_fixture("hexagon")

    def test_bad_options(self):
        with pytest.raises(BridgeValidationError, match="Bad options"):
            load_fixture("three_node_chain", colour="red")
