import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment, linprog

from graphbridge.ctmc_engine import path_kl, propagate_marginals
from graphbridge.exact_oracle import (
    brute_force_path_kl,
    committor,
    endpoint_coupling,
    euler_kernels,
    hjb_residual,
    sinkhorn_coupling,
    solve_assignment,
    solve_bridge_exact,
    solve_transport_lp,
    uniformized_transition_matrix,
)
from graphbridge.exceptions import (
    BridgeInfeasibleError,
    BridgeStiffnessError,
    BridgeValidationError,
)
from graphbridge.graph_core import DirectedGraph, RateGenerator


def path_generator(n, rate=1.0):
    edges = [(x, x + 1) for x in range(n - 1)] + [(x + 1, x) for x in range(n - 1)]
    return RateGenerator(DirectedGraph(n, edges), np.full(len(edges), rate))


class TestEulerKernels:
    def test_columns_are_distributions(self, random_generator):
        kernels = euler_kernels(random_generator(5, 4, max_rate=1.0), 16)
        assert kernels.shape == (16, 5, 5)
        assert np.allclose(kernels.sum(axis=1), 1.0)
        assert (kernels >= 0).all()

    def test_stiff(self, two_node):
        with pytest.raises(BridgeStiffnessError):
            euler_kernels(two_node.scaled(10), 4)


class TestBridge:
    def test_chain_bridge_hits_both_ends(self, chain):
        solution = solve_bridge_exact(chain.generator, chain.mu, chain.nu, chain.K)
        marginals = solution.marginals()
        assert np.allclose(marginals[0], chain.mu, atol=1e-8)
        assert np.allclose(marginals[-1], chain.nu, atol=1e-8)
        assert solution.residual <= 1e-10

    def test_rates_reproduce_the_marginals(self, random_generator):
        generator = random_generator(5, 4, max_rate=1.0)
        mu = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
        nu = np.array([0.1, 0.1, 0.1, 0.2, 0.5])
        solution = solve_bridge_exact(generator, mu, nu, 20)
        propagated = propagate_marginals(solution.policy(), mu, 20)
        assert np.allclose(propagated, solution.marginals(), atol=1e-8)

    def test_coupling_matches_sinkhorn(self, random_generator):
        generator = random_generator(4, 3, max_rate=1.0)
        mu = np.array([0.4, 0.3, 0.2, 0.1])
        nu = np.array([0.1, 0.2, 0.3, 0.4])
        solution = solve_bridge_exact(generator, mu, nu, 20)
        coupling = endpoint_coupling(solution)
        assert np.allclose(coupling.sum(axis=1), mu, atol=1e-8)
        assert np.allclose(coupling.sum(axis=0), nu, atol=1e-8)
        assert np.allclose(
            coupling, sinkhorn_coupling(generator, mu, nu, 20), atol=1e-6
        )

    def test_bridge_kl_by_path_enumeration(self):
        generator = path_generator(3)
        mu, nu = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
        solution = solve_bridge_exact(generator, mu, nu, 8)
        expected = solution.log_phi[-1, 2] - solution.log_phi[0, 0]
        assert brute_force_path_kl(solution.policy(), generator, mu, 8) == pytest.approx(
            expected, rel=1e-8
        )
        assert brute_force_path_kl(generator, generator, mu, 8) == 0.0
        assert path_kl(solution.policy(), generator, mu, 8) > 0

    def test_potential_table_is_finite(self, chain):
        solution = solve_bridge_exact(chain.generator, chain.mu, chain.nu, chain.K)
        tables = solution.potential_table()
        assert np.isfinite(tables.Y).all() and np.isfinite(tables.Yhat).all()

    def test_unreachable_target(self, chain):
        with pytest.raises(BridgeValidationError, match="within K=1"):
            solve_bridge_exact(chain.generator, chain.mu, chain.nu, 1)

    def test_path_enumeration_limits(self, random_generator):
        generator = random_generator(5, 2, max_rate=1.0)
        with pytest.raises(BridgeValidationError, match="enumeration"):
            brute_force_path_kl(generator, generator, np.full(5, 0.2), 4)


class TestTransport:
    def test_matches_linprog(self, rng):
        n = 4
        C = rng.uniform(0, 1, (n, n))
        p0 = rng.dirichlet(np.ones(n))
        p1 = rng.dirichlet(np.ones(n))
        plan = solve_transport_lp(C, p0, p1)
        equality = np.vstack(
            [np.kron(np.eye(n), np.ones(n)), np.kron(np.ones(n), np.eye(n))]
        )
        reference = linprog(
            C.ravel(), A_eq=equality, b_eq=np.concatenate([p0, p1]), bounds=(0, None)
        )
        assert plan.cost == pytest.approx(reference.fun, abs=1e-5)
        assert plan.marginal_error(p0, p1) < 1e-5

    def test_identity(self):
        plan = solve_transport_lp(1 - np.eye(3), np.full(3, 1 / 3), np.full(3, 1 / 3))
        assert plan.cost == pytest.approx(0.0, abs=1e-9)
        assert np.allclose(plan.plan, np.eye(3) / 3, atol=1e-6)

    def test_unequal_masses(self):
        with pytest.raises(BridgeInfeasibleError):
            solve_transport_lp(np.ones((2, 2)), [0.5, 0.5], [0.5, 0.6])

    def test_shape_mismatch(self):
        with pytest.raises(BridgeValidationError):
            solve_transport_lp(np.ones((2, 3)), [0.5, 0.5], [0.5, 0.5])

    def test_assignment_matches_hungarian(self, rng):
        scores = rng.uniform(0, 1, (6, 6))
        _, expected = linear_sum_assignment(scores)
        assert solve_assignment(scores).tolist() == expected.tolist()


class TestHJBResidual:
    def test_constant_value_function(self, chain):
        assert hjb_residual(np.zeros((5, 3)), chain.generator) == 0.0

    def test_time_slope(self, chain):
        V = np.repeat(np.arange(5)[:, None] * 0.25, 3, axis=1)
        assert hjb_residual(V, chain.generator) == pytest.approx(1.0)
        f = -np.ones((5, 3))
        assert hjb_residual(V, chain.generator, f) == pytest.approx(0.0)

    def test_mask(self, chain):
        V = np.zeros((3, 3))
        V[1, 0] = 1.0
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, 2] = True
        assert hjb_residual(V, chain.generator, mask=mask) == 0.0


class TestCommittor:
    def test_symmetric_walk_is_linear(self):
        q = committor(path_generator(5), [0], [4])
        assert np.allclose(q, [0, 0.25, 0.5, 0.75, 1.0])

    def test_transition_matrix_input(self):
        matrix = uniformized_transition_matrix(path_generator(3))
        assert np.allclose(matrix.sum(axis=1), 1.0)
        assert np.allclose(committor(matrix, [0], [2]), [0, 0.5, 1])

    @pytest.mark.parametrize(
        "unfolded,folded", [([], [2]), ([0, 1], [1]), ([0], [7])]
    )
    def test_bad_sets(self, unfolded, folded):
        with pytest.raises(BridgeValidationError):
            committor(path_generator(3), unfolded, folded)
