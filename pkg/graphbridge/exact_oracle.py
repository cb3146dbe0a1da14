"""Ground-truth solvers for small instances.

The bridge solver works on the Euler kernels ``P_k = I + dt * R_k`` that the
rollout engine simulates, so the returned rates reproduce the bridge
marginals exactly under ``ctmc_engine.propagate_marginals``.
"""
import itertools
import typing as T
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from scipy.special import logsumexp

from graphbridge.ctmc_engine import (
    EdgeRatePolicy,
    Policy,
    as_policy,
    jump_probability_table,
)
from graphbridge.exceptions import (
    AbsoluteContinuityError,
    BridgeConvergenceError,
    BridgeInfeasibleError,
    BridgeStiffnessError,
    BridgeValidationError,
)
from graphbridge.flow_solver import FlowNetwork, min_cost_flow
from graphbridge.graph_core import RateGenerator
from graphbridge.potentials import PotentialTable

logger = getLogger(__name__)

MAX_BRIDGE_NODES = 64
MAX_PATH_NODES = 4
MAX_PATH_STEPS = 8
MAX_TRANSPORT_SIZE = 64


def euler_kernels(generator: RateGenerator, K: int) -> np.ndarray:
    """(K, N, N) column-convention kernels: ``P[k, y, x]`` = P(x -> y)"""
    dt = 1.0 / K
    graph = generator.graph
    kernels = np.zeros((K, graph.node_count, graph.node_count))
    for k in range(K):
        rates = generator.rates_at(k)
        stay = 1.0 - dt * generator.out_rate(k)
        if stay.min() < 0:
            x = int(stay.argmin())
            raise BridgeStiffnessError(
                f"Node {x} leaves at rate {generator.out_rate(k)[x]:g}, "
                f"too fast for dt={dt:g}. Use a larger horizon K."
            )
        kernels[k, graph.dst, graph.src] = dt * rates
        kernels[k][np.diag_indices(graph.node_count)] = stay
    return kernels


def _finite_max(values) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.max()) if finite.size else 0.0


def _log(values) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(values, dtype=float))


@dataclass
class BridgeSolution:
    log_phi: np.ndarray  # (K+1, N)
    log_phihat: np.ndarray  # (K+1, N)
    rates: np.ndarray  # (K, E) controlled rates of the forward bridge
    generator: RateGenerator
    iterations: int
    residual: float

    @property
    def K(self) -> int:
        return self.rates.shape[0]

    def marginals(self) -> np.ndarray:
        return np.exp(self.log_phi + self.log_phihat)

    def policy(self) -> EdgeRatePolicy:
        return EdgeRatePolicy(self.generator.graph, self.rates)

    def potential_table(self, floor: float = -50.0) -> PotentialTable:
        "Potentials as a finite table; zero potentials are floored at ``floor``"
        top = _finite_max(self.log_phi)
        top_hat = _finite_max(self.log_phihat)
        return PotentialTable(
            self.K,
            self.log_phi.shape[1],
            np.maximum(self.log_phi, top + floor),
            np.maximum(self.log_phihat, top_hat + floor),
        )


@np.errstate(divide="ignore", invalid="ignore")
def solve_bridge_exact(
    generator: RateGenerator,
    mu,
    nu,
    K: int,
    tol: float = 1e-10,
    max_iters: int = 10000,
) -> BridgeSolution:
    """Schrodinger bridge with zero running cost by alternating boundary fits.

    phi is propagated backward and phihat forward through the Euler kernels,
    refitting phihat_0 = mu / phi_0 and phi_K = nu / phihat_K until the
    terminal residual ||phi_K phihat_K - nu||_1 drops below ``tol``.
    """
    n = generator.graph.node_count
    if n > MAX_BRIDGE_NODES:
        raise BridgeValidationError(
            f"The exact bridge supports at most {MAX_BRIDGE_NODES} nodes, not {n}"
        )
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    log_P = _log(euler_kernels(generator, K))
    log_mu, log_nu = _log(mu), _log(nu)

    log_phi = np.zeros((K + 1, n))
    log_phihat = np.zeros((K + 1, n))
    residual = np.inf
    for iteration in range(1, max_iters + 1):
        # phi_K = nu / phihat_K, with the gauge fixed by max log phi_K = 0
        log_phi[K] -= _finite_max(log_phi[K])
        for k in range(K - 1, -1, -1):
            log_phi[k] = logsumexp(log_P[k] + log_phi[k + 1][:, None], axis=0)
        lost = (mu > 0) & ~np.isfinite(log_phi[0])
        if lost.any():
            raise BridgeValidationError(
                f"Node {int(np.flatnonzero(lost)[0])} carries mu mass but cannot "
                f"reach the support of nu within K={K} steps"
            )
        with np.errstate(invalid="ignore"):
            log_phihat[0] = np.where(mu > 0, log_mu - log_phi[0], -np.inf)
        for k in range(K):
            log_phihat[k + 1] = logsumexp(log_P[k] + log_phihat[k][None, :], axis=1)

        with np.errstate(invalid="ignore"):
            terminal = np.exp(log_phi[K] + log_phihat[K])
        terminal = np.nan_to_num(terminal)
        residual = float(np.abs(terminal - nu).sum())
        if residual <= tol:
            break
        unreachable = (nu > 0) & ~np.isfinite(log_phihat[K])
        if unreachable.any():
            raise BridgeValidationError(
                f"nu puts mass on node {int(np.flatnonzero(unreachable)[0])}, "
                f"which is unreachable from the support of mu within K={K} steps"
            )
        log_phi[K] = np.where(nu > 0, log_nu - log_phihat[K], -np.inf)
    else:
        raise BridgeConvergenceError(
            f"Exact bridge did not converge in {max_iters} iterations "
            f"(terminal residual {residual:.3g})",
            residual=residual,
        )
    logger.debug("Exact bridge converged after %d iterations", iteration)
    return BridgeSolution(
        log_phi=log_phi,
        log_phihat=log_phihat,
        rates=_bridge_rates(generator, log_phi),
        generator=generator,
        iterations=iteration,
        residual=residual,
    )


def _bridge_rates(generator: RateGenerator, log_phi: np.ndarray) -> np.ndarray:
    "u_k(y, x) = r_k(y, x) phi_{k+1}(y) / phi_k(x), zero where phi vanishes"
    graph = generator.graph
    K = log_phi.shape[0] - 1
    rates = np.zeros((K, graph.edge_count))
    for k in range(K):
        exponent = log_phi[k + 1, graph.dst] - log_phi[k, graph.src]
        live = np.isfinite(exponent)
        rates[k, live] = generator.rates_at(k)[live] * np.exp(exponent[live])
    return rates


def endpoint_coupling(solution: BridgeSolution) -> np.ndarray:
    "(N, N) joint law of (X_0, X_K) under the exact bridge, rows X_0"
    total = _total_kernel(solution.generator, solution.K)
    with np.errstate(divide="ignore"):
        log_total = np.log(total)
    joint = solution.log_phihat[0][:, None] + log_total.T + solution.log_phi[-1][None, :]
    return np.nan_to_num(np.exp(joint))


def _total_kernel(generator: RateGenerator, K: int) -> np.ndarray:
    total = np.eye(generator.graph.node_count)
    for kernel in euler_kernels(generator, K):
        total = kernel @ total
    return total


def sinkhorn_coupling(generator: RateGenerator, mu, nu, K: int, tol: float = 1e-12):
    """Static entropic coupling of mu and nu under the K-step Euler kernel.

    Matrix scaling of the total transition kernel with ``ot.sinkhorn``;
    agrees with ``endpoint_coupling`` of the exact bridge.
    """
    import ot

    total = _total_kernel(generator, K)
    with np.errstate(divide="ignore"):
        M = -np.log(total.T)
    M = np.where(np.isfinite(M), M, 1e3)
    return ot.sinkhorn(
        np.asarray(mu, dtype=float),
        np.asarray(nu, dtype=float),
        M,
        reg=1.0,
        numItermax=100000,
        stopThr=tol,
    )


def _dense_kernels(policy: Policy, K: int, dt: float) -> np.ndarray:
    probs, _ = jump_probability_table(policy, K, dt)
    graph = policy.graph
    kernels = np.zeros((K, graph.node_count, graph.node_count))
    for k in range(K):
        kernels[k, graph.dst, graph.src] = probs[k]
        leave = np.bincount(graph.src, weights=probs[k], minlength=graph.node_count)
        kernels[k][np.diag_indices(graph.node_count)] = 1.0 - leave
    return kernels


def brute_force_path_kl(
    u: T.Union[Policy, RateGenerator],
    r: T.Union[Policy, RateGenerator],
    mu,
    K: int,
    dt: T.Optional[float] = None,
) -> float:
    """KL between the two Euler chains by enumerating every path"""
    u, r = as_policy(u), as_policy(r)
    n = u.graph.node_count
    if n > MAX_PATH_NODES or K > MAX_PATH_STEPS:
        raise BridgeValidationError(
            f"Path enumeration needs N <= {MAX_PATH_NODES} and K <= {MAX_PATH_STEPS}, "
            f"got N={n}, K={K}"
        )
    dt = dt if dt is not None else 1.0 / K
    Pu, Pr = _dense_kernels(u, K, dt), _dense_kernels(r, K, dt)
    mu = np.asarray(mu, dtype=float)
    paths = np.array(list(itertools.product(range(n), repeat=K + 1)), dtype=np.int64)
    prob_u = mu[paths[:, 0]].copy()
    prob_r = mu[paths[:, 0]].copy()
    for k in range(K):
        prob_u *= Pu[k, paths[:, k + 1], paths[:, k]]
        prob_r *= Pr[k, paths[:, k + 1], paths[:, k]]
    live = prob_u > 0
    if (prob_r[live] <= 0).any():
        raise AbsoluteContinuityError(
            "A path has positive probability under u but zero under r"
        )
    return max(float((prob_u[live] * np.log(prob_u[live] / prob_r[live])).sum()), 0.0)


@dataclass
class TransportPlan:
    plan: np.ndarray  # (n, n), rows sum to p0 and columns to p1
    cost: T.Optional[float] = None

    @property
    def n(self) -> int:
        return self.plan.shape[0]

    def marginal_error(self, p0, p1) -> float:
        "max |row sum - p0| and |column sum - p1|"
        return float(
            max(
                np.abs(self.plan.sum(axis=1) - p0).max(),
                np.abs(self.plan.sum(axis=0) - p1).max(),
            )
        )


def _bipartite_network(C: np.ndarray, supply, demand) -> FlowNetwork:
    n = C.shape[0]
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return FlowNetwork(
        2 * n,
        rows.ravel(),
        n + cols.ravel(),
        np.full(n * n, np.inf),
        C.ravel(),
        np.concatenate([supply, -np.asarray(demand, dtype=float)]),
    )


def solve_transport_lp(C, p0, p1) -> TransportPlan:
    """Exact optimal transport plan through min-cost flow on the bipartite graph"""
    C = np.asarray(C, dtype=float)
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n) or p0.shape != (n,) or p1.shape != (n,):
        raise BridgeValidationError(
            f"Cost matrix {C.shape} does not match marginals {p0.shape}, {p1.shape}"
        )
    if n > MAX_TRANSPORT_SIZE:
        raise BridgeValidationError(
            f"The transport oracle supports n <= {MAX_TRANSPORT_SIZE}, not {n}"
        )
    if (p0 < 0).any() or (p1 < 0).any():
        raise BridgeValidationError("Marginals must be nonnegative")
    if abs(p0.sum() - p1.sum()) > 1e-9:
        raise BridgeInfeasibleError(
            f"Marginal masses differ: {p0.sum()!r} vs {p1.sum()!r}"
        )
    solution = min_cost_flow(_bipartite_network(C, p0, p1))
    plan = solution.flow.reshape(n, n)
    return TransportPlan(plan=plan, cost=float((plan * C).sum()))


def solve_assignment(scores) -> np.ndarray:
    """Permutation sigma minimizing sum_i scores[i, sigma(i)]"""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    ones = np.ones(n)
    solution = min_cost_flow(_bipartite_network(scores, ones, ones), mass_scale=1)
    return solution.integer_flow.reshape(n, n).argmax(axis=1)


def hjb_residual(V, generator: RateGenerator, f_values=None, mask=None) -> float:
    """max |(V_{k+1} - V_k)/dt + sum_y r(y,x)(1 - e^{V_k(x) - V_k(y)}) + f_k(x)|

    Taken over k < K and the (k, x) entries allowed by ``mask``.
    """
    V = np.asarray(V, dtype=float)
    K = V.shape[0] - 1
    dt = 1.0 / K
    graph = generator.graph
    f = np.zeros_like(V) if f_values is None else np.asarray(f_values, dtype=float)
    residuals = np.empty((K, graph.node_count))
    for k in range(K):
        with np.errstate(over="ignore"):
            jumps = generator.rates_at(k) * (1.0 - np.exp(V[k, graph.src] - V[k, graph.dst]))
        residuals[k] = (
            (V[k + 1] - V[k]) / dt
            + np.bincount(graph.src, weights=jumps, minlength=graph.node_count)
            + f[k]
        )
    if mask is not None:
        residuals = residuals[np.asarray(mask, dtype=bool)[:K]]
    residuals = np.abs(residuals)
    return float(residuals.max()) if residuals.size else 0.0


def uniformized_transition_matrix(generator: RateGenerator, k: int = 0) -> np.ndarray:
    "Row-convention jump chain I + Q / lambda with lambda the largest exit rate"
    out = generator.out_rate(k)
    rate = float(out.max()) if out.size and out.max() > 0 else 1.0
    matrix = np.eye(generator.graph.node_count)
    graph = generator.graph
    matrix[graph.src, graph.dst] += generator.rates_at(k) / rate
    matrix[np.diag_indices_from(matrix)] -= out / rate
    return matrix


def committor(
    dynamics: T.Union[RateGenerator, np.ndarray],
    unfolded: T.Iterable[int],
    folded: T.Iterable[int],
) -> np.ndarray:
    """Forward committor: probability of hitting ``folded`` before ``unfolded``.

    ``dynamics`` is a row-stochastic transition matrix or a rate generator,
    which is uniformized first.
    """
    if isinstance(dynamics, RateGenerator):
        tprob = uniformized_transition_matrix(dynamics)
    else:
        tprob = np.asarray(dynamics, dtype=float)
    n = tprob.shape[0]
    sources = np.unique(np.asarray(list(unfolded), dtype=np.int64))
    sinks = np.unique(np.asarray(list(folded), dtype=np.int64))
    if sources.size == 0 or sinks.size == 0:
        raise BridgeValidationError("Committor needs nonempty unfolded and folded sets")
    if np.intersect1d(sources, sinks).size:
        raise BridgeValidationError("Unfolded and folded sets overlap")
    if sources.min() < 0 or sinks.min() < 0 or max(sources.max(), sinks.max()) >= n:
        raise BridgeValidationError("Committor set refers to an unknown node")

    q = np.zeros(n)
    q[sinks] = 1.0
    interior = np.setdiff1d(np.arange(n), np.concatenate([sources, sinks]))
    if interior.size:
        system = np.eye(interior.size) - tprob[np.ix_(interior, interior)]
        rhs = tprob[np.ix_(interior, sinks)].sum(axis=1)
        try:
            q[interior] = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as e:
            raise BridgeValidationError(
                "Committor system is singular; some interior nodes cannot reach "
                f"either set ({e})"
            ) from e
    return np.clip(q, 0.0, 1.0)
