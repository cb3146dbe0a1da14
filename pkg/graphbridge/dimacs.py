"""DIMACS min-cost-flow files.

Records understood::

    c <comment>
    p min <nodes> <arcs>
    n <id> <flow>
    a <src> <dst> <low> <cap> <cost>

DIMACS ids are 1-based; graphbridge ids are 0-based.
"""
import typing as T
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from graphbridge.exceptions import (
    BridgeParseError,
    BridgeValidationError,
    GraphBridgeError,
)
from graphbridge.graph_core import (
    DirectedGraph,
    ProblemInstance,
    RateGenerator,
    endpoints_from_imbalances,
    preset_rates,
)
from graphbridge.utils.files import FileLike, open_file_like


@dataclass
class DimacsStats:
    node_count: int
    arc_count: int
    mean_out_degree: float
    capacity_histogram: T.Dict[float, int]
    modal_capacity: T.Optional[float]
    modal_capacity_share: float
    supply_nodes: int
    demand_nodes: int
    total_supply: float

    def as_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "arc_count": self.arc_count,
            "mean_out_degree": self.mean_out_degree,
            "capacity_histogram": {
                _number(cap): count for cap, count in self.capacity_histogram.items()
            },
            "modal_capacity": self.modal_capacity,
            "modal_capacity_share": self.modal_capacity_share,
            "supply_nodes": self.supply_nodes,
            "demand_nodes": self.demand_nodes,
            "total_supply": self.total_supply,
        }


def _number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


@dataclass
class DimacsProblem:
    graph: DirectedGraph
    imbalances: np.ndarray
    filename: T.Optional[str] = None

    @property
    def stats(self) -> DimacsStats:
        graph = self.graph
        caps = graph.capacities if graph.capacities is not None else np.zeros(0)
        histogram = Counter(caps.tolist())
        modal, modal_count = (
            histogram.most_common(1)[0] if histogram else (None, 0)
        )
        return DimacsStats(
            node_count=graph.node_count,
            arc_count=graph.edge_count,
            mean_out_degree=graph.edge_count / graph.node_count,
            capacity_histogram=dict(sorted(histogram.items())),
            modal_capacity=modal,
            modal_capacity_share=modal_count / max(graph.edge_count, 1),
            supply_nodes=int((self.imbalances > 0).sum()),
            demand_nodes=int((self.imbalances < 0).sum()),
            total_supply=float(self.imbalances[self.imbalances > 0].sum()),
        )

    def to_instance(
        self,
        K: int,
        *,
        endpoint_mode: str = "volume-weighted",
        rate_preset: str = "capacity",
        rate_scale: float = 1.0,
        cost=None,
        seed: int = 0,
    ) -> ProblemInstance:
        mu, nu = endpoints_from_imbalances(self.imbalances, endpoint_mode)
        rates = preset_rates(self.graph, rate_preset, rate_scale)
        return ProblemInstance(
            generator=RateGenerator(self.graph, rates),
            mu=mu,
            nu=nu,
            K=K,
            cost=cost,
            seed=seed,
            name=Path(self.filename).stem if self.filename else "dimacs",
            imbalances=self.imbalances,
            mass=float(self.imbalances[self.imbalances > 0].sum()),
        )


def _fields(parts, count, line_num, filename, record):
    if len(parts) != count:
        raise BridgeParseError(
            f"Malformed '{record}' record: expected {count - 1} fields, got {len(parts) - 1}",
            filename,
            line_num,
        )
    return parts[1:]


def _int(token, line_num, filename) -> int:
    try:
        return int(token)
    except ValueError:
        raise BridgeParseError(f"Expected an integer, got {token!r}", filename, line_num)


def _float(token, line_num, filename) -> float:
    try:
        value = float(token)
    except ValueError:
        raise BridgeParseError(f"Expected a number, got {token!r}", filename, line_num)
    if not np.isfinite(value):
        raise BridgeParseError(f"Expected a finite number, got {token!r}", filename, line_num)
    return value


def parse_dimacs_mcf(lines: T.Iterable[str], filename: str = None) -> DimacsProblem:
    node_count = declared_arcs = None
    problem_line = None
    imbalances = None
    edges, caps, costs = [], [], []
    arc_lines = []

    for line_num, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        record = parts[0]
        if record == "p":
            if problem_line is not None:
                raise BridgeParseError(
                    f"Duplicate problem line (first on line {problem_line})",
                    filename,
                    line_num,
                )
            kind, nodes, arcs = _fields(parts, 4, line_num, filename, "p")
            if kind != "min":
                raise BridgeParseError(
                    f"Only 'p min' problems are supported, not {kind!r}",
                    filename,
                    line_num,
                )
            node_count = _int(nodes, line_num, filename)
            declared_arcs = _int(arcs, line_num, filename)
            if node_count < 1 or declared_arcs < 0:
                raise BridgeParseError("Invalid problem size", filename, line_num)
            imbalances = np.zeros(node_count)
            problem_line = line_num
            continue
        if problem_line is None:
            raise BridgeParseError(
                f"'{record}' record before the problem line", filename, line_num
            )
        if record == "n":
            node, flow = _fields(parts, 3, line_num, filename, "n")
            node = _node(node, node_count, line_num, filename)
            imbalances[node] += _float(flow, line_num, filename)
        elif record == "a":
            src, dst, low, cap, cost = _fields(parts, 6, line_num, filename, "a")
            src = _node(src, node_count, line_num, filename)
            dst = _node(dst, node_count, line_num, filename)
            if _float(low, line_num, filename) != 0:
                raise BridgeParseError(
                    "Nonzero arc lower bounds are not supported", filename, line_num
                )
            edges.append((src, dst))
            caps.append(_float(cap, line_num, filename))
            costs.append(_float(cost, line_num, filename))
            arc_lines.append(line_num)
        else:
            raise BridgeParseError(f"Unknown record type {record!r}", filename, line_num)

    if problem_line is None:
        raise BridgeParseError("Missing 'p min' problem line", filename)
    if len(edges) != declared_arcs:
        raise BridgeParseError(
            f"Problem line declares {declared_arcs} arcs but {len(edges)} were found",
            filename,
            problem_line,
        )
    total = imbalances.sum()
    if abs(total) > 1e-9 * max(1.0, np.abs(imbalances).sum()):
        raise BridgeParseError(
            f"Node imbalances do not sum to zero (sum = {total:g})", filename
        )
    try:
        graph = DirectedGraph(node_count, edges or np.zeros((0, 2)), caps, costs)
    except BridgeValidationError as e:
        line_num = _offending_arc_line(edges, arc_lines)
        raise BridgeParseError(e.message, filename, line_num) from e
    return DimacsProblem(graph=graph, imbalances=imbalances, filename=filename)


def _node(token, node_count, line_num, filename) -> int:
    node = _int(token, line_num, filename)
    if not 1 <= node <= node_count:
        raise BridgeParseError(
            f"Node id {node} outside 1..{node_count}", filename, line_num
        )
    return node - 1


def _offending_arc_line(edges, arc_lines) -> T.Optional[int]:
    seen = set()
    for (src, dst), line_num in zip(edges, arc_lines):
        if src == dst or (src, dst) in seen:
            return line_num
        seen.add((src, dst))
    return None


def load_dimacs_mcf(path: FileLike) -> DimacsProblem:
    with open_file_like(path, "r") as (filepath, f):
        filename = str(filepath) if filepath else None
        try:
            return parse_dimacs_mcf(f, filename)
        except GraphBridgeError:
            raise
        except UnicodeDecodeError as e:
            raise BridgeParseError(f"Not a text file: {e}", filename) from e


def write_dimacs_mcf(
    path: FileLike,
    graph: DirectedGraph,
    imbalances,
    comment: str = None,
) -> None:
    caps = graph.capacities
    costs = graph.costs
    if caps is None or costs is None:
        raise BridgeValidationError("Writing DIMACS needs edge capacities and costs")
    imbalances = np.asarray(imbalances, dtype=float)
    with open_file_like(path, "w") as (_, f):
        if comment:
            for line in comment.splitlines():
                f.write(f"c {line}\n")
        f.write(f"p min {graph.node_count} {graph.edge_count}\n")
        for node in np.flatnonzero(imbalances):
            f.write(f"n {node + 1} {_number(imbalances[node])}\n")
        for e in range(graph.edge_count):
            f.write(
                f"a {graph.src[e] + 1} {graph.dst[e] + 1} 0 "
                f"{_number(caps[e])} {_number(costs[e])}\n"
            )
