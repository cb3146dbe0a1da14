"""Comparison policies, all rolled out by the same engine as trained potentials.

Baselines that are naturally row-stochastic kernels (attraction flow, the
embedded W1 flow, the Doob transform) become ``KernelPolicy`` objects whose
Euler-chain jump probabilities equal the kernel entries.
"""
import typing as T
import warnings
from logging import getLogger

import numpy as np
from scipy.sparse import csgraph
from scipy.sparse import linalg as sparse_linalg

from graphbridge.ctmc_engine import EdgeRatePolicy, propagate_marginals
from graphbridge.exact_oracle import committor
from graphbridge.exceptions import BridgeNumericalError, BridgeValidationError
from graphbridge.flow_solver import build_time_expanded, min_cost_flow
from graphbridge.graph_core import DirectedGraph, ProblemInstance, RateGenerator
from graphbridge.metrics import total_variation

logger = getLogger(__name__)

BASELINES = ("uncontrolled", "attraction", "w1flow", "doob")

MOVE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
SMOOTHING_MASSES = (0.0, 0.01, 0.05)
COMMITTOR_FLOOR = 1e-12
DOWNHILL_TOLERANCE = 1e-12


class KernelPolicy(EdgeRatePolicy):
    """Per-step jump probabilities (K, E) with the stay probability implied"""

    def __init__(self, graph: DirectedGraph, jump_probabilities, dt: float, info=None):
        probs = np.asarray(jump_probabilities, dtype=float)
        super().__init__(graph, probs / dt)
        self.jump_probabilities = probs
        self.dt = dt
        self.info: T.Dict[str, T.Any] = dict(info or {})

    def stay_probabilities(self, k: int) -> np.ndarray:
        leave = np.bincount(
            self.graph.src,
            weights=self.jump_probabilities[k],
            minlength=self.graph.node_count,
        )
        return 1.0 - leave

    def kernel_rows(self) -> T.Iterator[T.Tuple[int, int, int, float]]:
        "(t, src, dst, prob) for every positive entry, self-loops included"
        for k in range(self.jump_probabilities.shape[0]):
            for x, p in enumerate(self.stay_probabilities(k)):
                if p > 0:
                    yield k, x, x, float(p)
            for e in np.flatnonzero(self.jump_probabilities[k] > 0):
                yield k, int(self.graph.src[e]), int(self.graph.dst[e]), float(
                    self.jump_probabilities[k, e]
                )


def uncontrolled_policy(generator: RateGenerator) -> EdgeRatePolicy:
    return EdgeRatePolicy.from_generator(generator)


def select_embedding(
    build: T.Callable[[float], KernelPolicy],
    candidates: T.Sequence[float],
    mu,
    nu,
    K: int,
) -> T.Tuple[float, KernelPolicy, float]:
    """Pick the embedding parameter whose exact terminal marginal is closest to nu.

    Ties go to the earliest candidate.
    """
    best = None
    for value in candidates:
        policy = build(value)
        marginals = propagate_marginals(policy, mu, K)
        tv = total_variation(marginals[-1], nu)
        logger.debug("Embedding parameter %g: validation TV %.4g", value, tv)
        if best is None or tv < best[2] - 1e-15:
            best = (value, policy, tv)
    return best


def _check_connected(graph: DirectedGraph):
    count, _ = csgraph.connected_components(
        graph.adjacency(), directed=True, connection="weak"
    )
    if count > 1:
        raise BridgeValidationError(
            f"Attraction flow needs a connected graph; this one has {count} components"
        )


def _grounded_solver(graph: DirectedGraph, ground: int):
    "Solves L phi = rhs with phi fixed to 0 at node ``ground``"
    undirected = graph.adjacency()
    undirected = ((undirected + undirected.T) > 0).astype(float)
    laplacian = csgraph.laplacian(undirected).tocsc()
    keep = np.flatnonzero(np.arange(graph.node_count) != ground)
    reduced = laplacian[keep][:, keep].tocsc()

    def solve(rhs):
        phi = np.zeros(graph.node_count)
        if keep.size:
            phi[keep] = sparse_linalg.spsolve(reduced, rhs[keep])
        return phi

    return solve


def attraction_kernel(graph: DirectedGraph, phi, move_fraction: float) -> np.ndarray:
    "Jump probabilities proportional to the downhill drop of ``phi`` along out-edges"
    drop = np.maximum(phi[graph.src] - phi[graph.dst] - DOWNHILL_TOLERANCE, 0.0)
    totals = np.bincount(graph.src, weights=drop, minlength=graph.node_count)
    share = np.where(totals[graph.src] > 0, drop / np.where(totals > 0, totals, 1.0)[graph.src], 0.0)
    return move_fraction * share


def attraction_flow_policy(
    graph: DirectedGraph,
    mu,
    rho_target,
    K: int,
    move_fraction: T.Union[float, T.Sequence[float]] = MOVE_FRACTIONS,
) -> KernelPolicy:
    """Mass follows a graph potential solving L phi_t = rho_t - rho_target.

    ``rho_t`` is advanced by applying each step's kernel. A sequence of move
    fractions is tuned by validation TV.
    """
    _check_connected(graph)
    rho_target = np.asarray(rho_target, dtype=float)
    solve = _grounded_solver(graph, int(rho_target.argmax()))
    dt = 1.0 / K

    def build(alpha: float) -> KernelPolicy:
        rho = np.asarray(mu, dtype=float).copy()
        probs = np.zeros((K, graph.edge_count))
        for k in range(K):
            probs[k] = attraction_kernel(graph, solve(rho - rho_target), alpha)
            flux = probs[k] * rho[graph.src]
            rho = (
                rho
                - np.bincount(graph.src, weights=flux, minlength=graph.node_count)
                + np.bincount(graph.dst, weights=flux, minlength=graph.node_count)
            )
        return KernelPolicy(graph, probs, dt, info={"move_fraction": alpha})

    if np.ndim(move_fraction) == 0:
        return build(float(move_fraction))
    alpha, policy, tv = select_embedding(build, move_fraction, mu, rho_target, K)
    policy.info["validation_tv"] = tv
    return policy


def w1_flow_policy(
    graph: DirectedGraph,
    capacities,
    costs,
    mu,
    nu,
    K: int,
    mass: float = 1.0,
    smoothing: T.Union[float, T.Sequence[float]] = SMOOTHING_MASSES,
) -> KernelPolicy:
    """Markovian embedding of the time-expanded minimum-cost flow.

    Layer-t kernels are P_t(y | x) = flow_t(x -> y) / mass_t(x), holdover
    included; nodes without mass hold. Smoothing moves a fraction of every
    row uniformly onto its out-edges.
    """
    costs = np.ones(graph.edge_count) if costs is None else costs
    expanded = build_time_expanded(graph, capacities, costs, mu, nu, K, mass)
    solution = min_cost_flow(expanded.network)
    transport, holdover = expanded.split(solution.flow)
    layer_mass = holdover + np.stack(
        [
            np.bincount(graph.src, weights=transport[k], minlength=graph.node_count)
            for k in range(K)
        ]
    )
    denominator = np.where(layer_mass > 0, layer_mass, 1.0)
    base = transport / denominator[:, graph.src]
    out_degree = graph.out_degree()
    spread = np.where(out_degree[graph.src] > 0, 1.0 / np.maximum(out_degree[graph.src], 1), 0.0)
    dt = 1.0 / K
    info = {
        "flow_cost": solution.cost,
        "transport": transport,
        "holdover": holdover,
        "certificate": solution.certificate,
    }

    def build(delta: float) -> KernelPolicy:
        probs = (1.0 - delta) * base + delta * spread[None, :]
        return KernelPolicy(graph, probs, dt, info={**info, "smoothing": delta})

    if np.ndim(smoothing) == 0:
        return build(float(smoothing))
    delta, policy, tv = select_embedding(build, smoothing, mu, nu, K)
    if delta > 0:
        warnings.warn(f"W1 flow embedding selected smoothing mass {delta:g}")
    policy.info["validation_tv"] = tv
    return policy


def doob_policy(
    generator: RateGenerator,
    K: int,
    q=None,
    unfolded: T.Iterable[int] = None,
    folded: T.Iterable[int] = None,
    floor: float = COMMITTOR_FLOOR,
) -> KernelPolicy:
    """Doob h-transform of the one-step Euler kernel with h = max(q, floor).

    T^h(i, j) = T(i, j) h(j) / sum_k T(i, k) h(k), in row convention.
    """
    if q is None:
        if unfolded is None or folded is None:
            raise BridgeValidationError("doob_policy needs a committor or both basins")
        q = committor(generator, unfolded, folded)
    graph = generator.graph
    h = np.maximum(np.asarray(q, dtype=float), floor)
    dt = 1.0 / K
    probs = np.zeros((K, graph.edge_count))
    for k in range(K):
        jump = dt * generator.rates_at(k)
        stay = 1.0 - np.bincount(graph.src, weights=jump, minlength=graph.node_count)
        weighted = jump * h[graph.dst]
        normalizer = stay * h + np.bincount(
            graph.src, weights=weighted, minlength=graph.node_count
        )
        if (normalizer <= 0).any():
            x = int(np.flatnonzero(normalizer <= 0)[0])
            raise BridgeNumericalError(
                f"Doob transform normalizer vanishes at node {x}, step {k}"
            )
        probs[k] = weighted / normalizer[graph.src]
    return KernelPolicy(graph, probs, dt, info={"committor": h})


def build_baseline(
    method: str,
    instance: ProblemInstance,
    target_set: T.Iterable[int] = None,
    mass: float = None,
):
    "Policy of the named baseline for ``instance``"
    graph = instance.graph
    if method == "uncontrolled":
        return uncontrolled_policy(instance.generator)
    if method == "attraction":
        return attraction_flow_policy(graph, instance.mu, instance.nu, instance.K)
    if method == "w1flow":
        return w1_flow_policy(
            graph,
            graph.capacities,
            graph.costs,
            instance.mu,
            instance.nu,
            instance.K,
            mass=mass or instance.mass or 1.0,
        )
    if method == "doob":
        folded = target_set if target_set is not None else np.flatnonzero(instance.nu > 0)
        unfolded = np.setdiff1d(np.flatnonzero(instance.mu > 0), list(folded))
        return doob_policy(instance.generator, instance.K, unfolded=unfolded, folded=folded)
    raise BridgeValidationError(
        f"Unknown baseline {method!r}; choose from {', '.join(BASELINES)}"
    )
