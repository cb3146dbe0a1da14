import numpy as np
import pytest

from graphbridge.ctmc_engine import (
    BACKWARD,
    EdgeRatePolicy,
    kl_integrand,
    jump_probability_table,
    occupancy,
    path_kl,
    propagate_marginals,
    rollout,
    step_distribution,
    transition_counts,
)
from graphbridge.exceptions import (
    AbsoluteContinuityError,
    BridgeSimulationError,
    BridgeStiffnessError,
    BridgeValidationError,
)
from graphbridge.graph_core import DirectedGraph, RateGenerator


class TestStepDistribution:
    def test_small_rates(self):
        step = step_distribution([0.5, 0.5], dt=0.5)
        assert step.jump.tolist() == [0.25, 0.25]
        assert step.stay == 0.5
        assert not step.clamped

    def test_clamped(self):
        step = step_distribution([4.0, 4.0], dt=0.25)
        assert step.jump.tolist() == [0.5, 0.5]
        assert step.stay == 0.0
        assert step.clamped

    def test_bad_inputs(self):
        with pytest.raises(BridgeValidationError):
            step_distribution([1.0], dt=0)
        with pytest.raises(BridgeSimulationError):
            step_distribution([-1.0], dt=0.1)

    def test_clamp_count_per_step_and_node(self, two_node):
        table, clamps = jump_probability_table(
            EdgeRatePolicy.from_generator(two_node.scaled(100)), 2, 0.5
        )
        assert clamps == 4
        assert np.allclose(table, 1.0)


class TestRollout:
    def test_shape_and_start(self, chain):
        batch = rollout(
            EdgeRatePolicy.from_generator(chain.generator), chain.mu, 300, chain.K
        )
        assert batch.trajectories.shape == (300, chain.K + 1)
        assert (batch.trajectories[:, 0] == 0).all()
        batch.check_topology()

    def test_worker_count_does_not_change_the_batch(self, random_generator):
        generator = random_generator(6, 5)
        policy = EdgeRatePolicy.from_generator(generator)
        mu = np.full(6, 1 / 6)
        one = rollout(policy, mu, 1000, 20, seed=7, workers=1)
        many = rollout(policy, mu, 1000, 20, seed=7, workers=4)
        assert np.array_equal(one.trajectories, many.trajectories)

    def test_seed_changes_the_batch(self, chain):
        policy = EdgeRatePolicy.from_generator(chain.generator)
        a = rollout(policy, chain.mu, 200, chain.K, seed=1)
        b = rollout(policy, chain.mu, 200, chain.K, seed=2)
        assert not np.array_equal(a.trajectories, b.trajectories)

    def test_empirical_marginals_match_propagation(self, random_generator):
        generator = random_generator(5, 4, max_rate=1.5)
        mu = np.array([0.4, 0.1, 0.2, 0.2, 0.1])
        K = 16
        batch = rollout(EdgeRatePolicy.from_generator(generator), mu, 20000, K, seed=3)
        exact = propagate_marginals(generator, mu, K)
        assert np.abs(batch.empirical_marginals() - exact).max() < 0.02

    def test_single_node_never_moves(self, single_node):
        batch = rollout(
            EdgeRatePolicy.from_generator(single_node.generator), [1.0], 10, 5
        )
        assert (batch.trajectories == 0).all()

    def test_clamped_batch_jumps_every_step(self, two_node):
        batch = rollout(
            EdgeRatePolicy.from_generator(two_node.scaled(100)),
            [1.0, 0.0],
            8,
            2,
            direction=BACKWARD,
        )
        assert batch.clamp_count == 4
        assert batch.direction == BACKWARD
        assert (batch.trajectories == [0, 1, 0]).all()

    def test_invalid_policy_rates(self, two_node):
        policy = EdgeRatePolicy(two_node.graph, [1.0, -1.0])
        with pytest.raises(BridgeSimulationError, match="edge 1 -> 0"):
            rollout(policy, [0.5, 0.5], 4, 4)

    def test_bad_arguments(self, two_node):
        policy = EdgeRatePolicy.from_generator(two_node)
        with pytest.raises(BridgeValidationError):
            rollout(policy, [0.5, 0.5], 0, 4)
        with pytest.raises(BridgeValidationError):
            rollout(policy, [1.0, 0.0, 0.0], 4, 4)
        with pytest.raises(BridgeValidationError):
            EdgeRatePolicy(two_node.graph, [1.0])


class TestCounting:
    def test_occupancy_and_transitions(self, chain):
        batch = rollout(
            EdgeRatePolicy.from_generator(chain.generator), chain.mu, 500, chain.K
        )
        field = occupancy(batch, exclude=[1])
        assert (field.counts.sum(axis=1) == 500).all()
        assert field.included_counts().shape == (chain.K + 1, 2)
        moves = (batch.trajectories[:, 1:] != batch.trajectories[:, :-1]).sum()
        assert transition_counts(batch).sum() == moves

    def test_transition_outside_the_graph(self, chain):
        batch = rollout(
            EdgeRatePolicy.from_generator(chain.generator), chain.mu, 4, 2
        )
        batch.trajectories[0] = [0, 2, 2]
        with pytest.raises(BridgeSimulationError):
            transition_counts(batch)
        with pytest.raises(BridgeSimulationError, match="not an edge"):
            batch.check_topology()


class TestPropagation:
    def test_mass_is_conserved(self, random_generator):
        generator = random_generator(7, 6)
        p = propagate_marginals(generator, np.full(7, 1 / 7), 40)
        assert p.shape == (41, 7)
        assert np.allclose(p.sum(axis=1), 1.0)
        assert (p >= 0).all()

    def test_stiff_rates(self, two_node):
        with pytest.raises(BridgeStiffnessError, match="larger horizon"):
            propagate_marginals(two_node.scaled(100), [1.0, 0.0], 1)


class TestPathKL:
    def test_integrand(self):
        assert kl_integrand(np.array([1.0]), np.array([1.0])).tolist() == [0.0]
        assert kl_integrand(np.array([0.0]), np.array([2.0])).tolist() == [2.0]
        with pytest.raises(AbsoluteContinuityError):
            kl_integrand(np.array([1.0]), np.array([0.0]))

    def test_zero_against_itself(self, chain):
        assert path_kl(chain.generator, chain.generator, chain.mu, chain.K) == 0.0

    def test_doubled_rates(self, two_node):
        kl = path_kl(two_node.scaled(2), two_node, [0.5, 0.5], 10)
        assert kl == pytest.approx(2 * np.log(2) - 1)

    def test_absolute_continuity_names_the_step(self):
        graph = DirectedGraph(2, [(0, 1)])
        with pytest.raises(AbsoluteContinuityError, match="step 0"):
            path_kl(
                RateGenerator(graph, [1.0]), RateGenerator(graph, [0.0]), [1, 0], 4
            )
