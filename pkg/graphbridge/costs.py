"""Running costs f_t(x, p_t).

Costs see the time step only through the empirical marginal ``p_hat_k``;
the ``k`` argument is kept so that time-varying tables can be added.
"""
import typing as T
from dataclasses import dataclass, replace

import numpy as np

from graphbridge.exceptions import BridgeValidationError

COST_KINDS = ("zero", "node_table", "congestion")

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class RunningCostSpec:
    kind: str = "zero"
    node_table: T.Optional[T.Tuple[float, ...]] = None
    weight: float = 0.0
    exclude: T.Tuple[int, ...] = ()
    b_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise BridgeValidationError(
                f"Unknown cost kind {self.kind!r}; choose from {', '.join(COST_KINDS)}"
            )
        if self.kind == "node_table":
            if self.node_table is None:
                raise BridgeValidationError("A node_table cost needs a table")
            if not np.isfinite(np.asarray(self.node_table, dtype=float)).all():
                raise BridgeValidationError("Cost table entries must be finite")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise BridgeValidationError(
                f"Congestion weight must be nonnegative, not {self.weight}"
            )
        if self.b_scale <= 0:
            raise BridgeValidationError(f"b_scale must be positive, not {self.b_scale}")

    def validate_for(self, node_count: int) -> None:
        if self.kind == "node_table" and len(self.node_table) != node_count:
            raise BridgeValidationError(
                f"Cost table has {len(self.node_table)} entries; the graph has {node_count} nodes"
            )
        bad = [x for x in self.exclude if not 0 <= x < node_count]
        if bad:
            raise BridgeValidationError(f"Excluded node {bad[0]} is not in the graph")

    @property
    def is_zero(self) -> bool:
        if self.kind == "zero":
            return True
        if self.kind == "congestion":
            return self.weight == 0
        return not np.any(np.asarray(self.node_table, dtype=float))

    def scaled(self, factor: float) -> "RunningCostSpec":
        if self.kind == "node_table":
            table = tuple(float(v) * factor for v in self.node_table)
            return replace(self, node_table=table)
        return replace(self, weight=self.weight * factor)

    def with_weight(self, weight: float) -> "RunningCostSpec":
        "Congestion weight set to ``weight``; node tables are multiplied by it"
        if self.kind == "congestion":
            return replace(self, weight=float(weight))
        if self.kind == "node_table":
            return self.scaled(weight)
        return self

    @classmethod
    def zero(cls) -> "RunningCostSpec":
        return cls()

    @classmethod
    def from_table(cls, table) -> "RunningCostSpec":
        return cls(kind="node_table", node_table=tuple(float(v) for v in table))

    @classmethod
    def congestion(cls, weight: float, exclude=(), b_scale: float = 1.0):
        return cls(
            kind="congestion",
            weight=float(weight),
            exclude=tuple(int(x) for x in exclude),
            b_scale=float(b_scale),
        )


def eval_cost(spec: RunningCostSpec, k: int, x: int, p_hat_k) -> float:
    if spec.kind == "zero":
        return 0.0
    if spec.kind == "node_table":
        return float(spec.node_table[x])
    if x in spec.exclude:
        return 0.0
    return spec.weight * float(p_hat_k[x]) * spec.b_scale


def cost_table(spec: RunningCostSpec, p_hat: np.ndarray) -> np.ndarray:
    """f_k(x, p_hat_k) for every grid step k and node x.

    ``p_hat`` is the (K+1, N) table of empirical marginals.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    if spec.kind == "zero":
        return np.zeros_like(p_hat)
    if spec.kind == "node_table":
        table = np.asarray(spec.node_table, dtype=float)
        return np.broadcast_to(table, p_hat.shape).copy()
    values = spec.weight * spec.b_scale * p_hat
    if spec.exclude:
        values[:, list(spec.exclude)] = 0.0
    return values


def free_energy_table(stationary) -> np.ndarray:
    "Node free energies -log pi in units of k_B T"
    pi = np.asarray(stationary, dtype=float)
    return -np.log(np.maximum(pi, LOG_FLOOR))
