"""Tabular log-potentials and the controlled rates they induce.

``Y[k, x]`` is the forward log-potential log phi_k(x) and ``Yhat[k, x]`` the
backward one, both on the grid k = 0..K. Forward step k uses row k of ``Y``.
Backward step j covers the forward interval [t_{K-1-j}, t_{K-j}] and uses
row K-1-j of ``Yhat`` and of the reference rates.

Only differences along edges enter the rates, so adding a constant to a row
changes nothing.
"""
import typing as T

import numpy as np

from graphbridge.ctmc_engine import BACKWARD, FORWARD, Policy
from graphbridge.exceptions import BridgeStructuralError, BridgeValidationError
from graphbridge.graph_core import RateGenerator

EXPONENT_CLIP = 30.0


def clipped_exp(z: np.ndarray) -> T.Tuple[np.ndarray, np.ndarray]:
    "exp(z) with z clipped to +/-EXPONENT_CLIP, plus the saturation mask"
    saturated = np.abs(z) > EXPONENT_CLIP
    return np.exp(np.clip(z, -EXPONENT_CLIP, EXPONENT_CLIP)), saturated


class PotentialTable:
    def __init__(self, K: int, node_count: int, Y=None, Yhat=None):
        self.K = int(K)
        self.node_count = int(node_count)
        shape = (self.K + 1, self.node_count)
        self.Y = np.zeros(shape) if Y is None else np.array(Y, dtype=float)
        self.Yhat = np.zeros(shape) if Yhat is None else np.array(Yhat, dtype=float)
        for name, table in (("Y", self.Y), ("Yhat", self.Yhat)):
            if table.shape != shape:
                raise BridgeValidationError(
                    f"{name} table has shape {table.shape}, expected {shape}"
                )
            if not np.isfinite(table).all():
                raise BridgeValidationError(f"{name} table has non-finite entries")

    @property
    def dt(self) -> float:
        return 1.0 / self.K

    def copy(self) -> "PotentialTable":
        return PotentialTable(self.K, self.node_count, self.Y, self.Yhat)

    def forward_policy(self, generator: RateGenerator) -> "ControlledPolicy":
        return ControlledPolicy(generator, self, FORWARD)

    def backward_policy(self, generator: RateGenerator) -> "ControlledPolicy":
        return ControlledPolicy(generator, self, BACKWARD)

    def __eq__(self, other):
        if not isinstance(other, PotentialTable):
            return NotImplemented
        return np.array_equal(self.Y, other.Y) and np.array_equal(self.Yhat, other.Yhat)


def mirrored_index(K: int, j: int) -> int:
    "Grid row used by backward step j"
    return K - 1 - j


class ControlledPolicy(Policy):
    """Rates r * exp(potential difference) on the forward or reversed graph.

    Backward policies live on the reversed graph, whose edge ``e`` is the
    original edge ``e`` turned around, so reference rates line up by index.
    """

    def __init__(self, generator: RateGenerator, tables: PotentialTable, direction):
        if direction not in (FORWARD, BACKWARD):
            raise BridgeValidationError(f"Unknown direction {direction!r}")
        if tables.node_count != generator.graph.node_count:
            raise BridgeValidationError("Potential table does not match the graph")
        self.generator = generator
        self.tables = tables
        self.direction = direction
        self.graph = (
            generator.graph if direction == FORWARD else generator.graph.reversed()
        )
        self.saturation_count = 0

    def exponents(self, k: int) -> np.ndarray:
        original = self.generator.graph
        if self.direction == FORWARD:
            Y = self.tables.Y[k]
            return Y[original.dst] - Y[original.src]
        Yhat = self.tables.Yhat[mirrored_index(self.tables.K, k)]
        return Yhat[original.src] - Yhat[original.dst]

    def reference_rates(self, k: int) -> np.ndarray:
        if self.direction == FORWARD:
            return self.generator.rates_at(k)
        return self.generator.rates_at(mirrored_index(self.tables.K, k))

    def edge_rates(self, k: int) -> np.ndarray:
        if not 0 <= k < self.tables.K:
            raise BridgeValidationError(
                f"Step {k} is outside the horizon 0..{self.tables.K - 1}"
            )
        factors, saturated = clipped_exp(self.exponents(k))
        self.saturation_count += int(saturated.sum())
        return self.reference_rates(k) * factors


def forward_rate(policy: ControlledPolicy, k: int, x: int, y: int) -> float:
    "u_k(y, x) = r_k(y, x) exp(Y_k(y) - Y_k(x)) for the edge x -> y"
    if policy.direction != FORWARD:
        raise BridgeValidationError("forward_rate needs a forward policy")
    try:
        e = policy.graph.edge_index(x, y)
    except BridgeStructuralError:
        raise BridgeStructuralError(f"No forward edge {x} -> {y}")
    factor, _ = clipped_exp(policy.exponents(k)[e])
    return float(policy.reference_rates(k)[e] * factor)


def backward_rate(policy: ControlledPolicy, k: int, x: int, y: int) -> float:
    """Backward move x -> y along the original edge y -> x at backward step k"""
    if policy.direction != BACKWARD:
        raise BridgeValidationError("backward_rate needs a backward policy")
    try:
        e = policy.generator.graph.edge_index(y, x)
    except BridgeStructuralError:
        raise BridgeStructuralError(f"No reversed edge {x} -> {y} (needs {y} -> {x})")
    factor, _ = clipped_exp(policy.exponents(k)[e])
    return float(policy.reference_rates(k)[e] * factor)


def optimal_rate_from_dual(
    V, generator: RateGenerator, x: int, y: int, k: int = 0
) -> float:
    "r(y, x) exp(V(x) - V(y)): the optimal rate for a value function V"
    V = np.asarray(V, dtype=float)
    e = generator.graph.edge_index(x, y)
    factor, _ = clipped_exp(np.asarray(V[x] - V[y]))
    return float(generator.rates_at(k)[e] * factor)
