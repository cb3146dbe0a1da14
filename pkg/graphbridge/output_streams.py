from abc import abstractmethod, ABC
import csv
import json
import struct
import sys
from collections import namedtuple
from pathlib import Path
from typing import Dict, Mapping, Callable, Optional, Sequence
import typing as T

import numpy as np

from graphbridge.ctmc_engine import FORWARD, RolloutBatch
from graphbridge.exceptions import BridgeParseError
from graphbridge.graph_core import DirectedGraph


def noop(x):
    return x


class OutputStream(ABC):
    """Common base class for all output streams"""

    count = 1
    flush_limit = 1000
    encoders: Mapping[type, Callable] = {
        str: str,
        int: int,
        float: float,
        bool: int,
        type(None): noop,
        np.int64: int,
        np.int32: int,
        np.float64: float,
        np.bool_: int,
    }
    uses_folder = False

    def __init__(self, filename, **kwargs):
        pass

    def flush(self):
        pass  # pragma: no cover   -- subclasses override

    def cleanup(self, field_name, field_value, tablename):
        encoder = self.encoders.get(type(field_value))
        if not encoder:
            raise TypeError(  # pragma: no cover
                f"No encoder found for {type(field_value)} in {self.__class__.__name__} "
                f"for {field_name}, {field_value} in {tablename}"
            )
        return encoder(field_value)

    def write_row(self, tablename: str, row: Dict) -> None:
        cleaned = {
            field_name: self.cleanup(field_name, field_value, tablename)
            for field_name, field_value in row.items()
        }
        self.write_single_row(tablename, cleaned)
        if self.count % self.flush_limit == 0:
            self.flush()
        self.count += 1

    def write_rows(self, tablename: str, rows: T.Iterable[Dict]) -> None:
        for row in rows:
            self.write_row(tablename, row)

    @abstractmethod
    def write_single_row(self, tablename: str, row: Dict) -> None:
        """Write a single row to the stream"""
        pass

    def close(self, **kwargs) -> Optional[Sequence[str]]:
        """Close any resources the stream opened.

        Do not close file handles which were passed in!

        Return a list of messages to print out.
        """
        raise NotImplementedError()

    def __enter__(self, *args):
        return self

    def __exit__(self, *args):
        self.close()


class SmartStream:
    """Common code for managing stream/file opening/closing

    Expects to be initialized with either a file-like object with a `write` method,
    or a path (str or pathlib.Path) that can be opened using `open()`
    """

    mode = "wt"

    def __init__(self, stream_or_path=None, **kwargs):
        if stream_or_path and hasattr(stream_or_path, "write"):
            self.owns_stream = False
            self.stream = stream_or_path
        elif stream_or_path:
            self.stream = open(stream_or_path, self.mode)
            self.owns_stream = True
        elif stream_or_path is None:
            self.owns_stream = False
            self.stream = sys.stdout
        else:
            raise AssertionError(f"stream_or_path is {stream_or_path}")

    def write(self, data):
        self.stream.write(data)

    def flush(self):
        self.stream.flush()

    def close(self, **kwargs):
        if self.owns_stream:
            self.stream.close()
            return [f"Created {self.stream.name}"]
        return []


class JSONLinesOutputStream(OutputStream):
    """One JSON object per line; the table name goes in ``_table`` if asked."""

    def __init__(self, stream_or_path=None, include_table: bool = False, **kwargs):
        self.smart_stream = SmartStream(stream_or_path)
        self.include_table = include_table

    def write_single_row(self, tablename: str, row: Dict) -> None:
        values = {"_table": tablename, **row} if self.include_table else row
        self.smart_stream.write(json.dumps(values, sort_keys=True) + "\n")

    def flush(self):
        self.smart_stream.flush()

    def close(self, **kwargs) -> Optional[Sequence[str]]:
        return self.smart_stream.close()


CSVContext = namedtuple("CSVContext", ["dictwriter", "file"])


class CSVOutputStream(OutputStream):
    """Output stream that generates a directory of CSV files, one per table.

    Each table's columns are fixed by its first row.
    """

    uses_folder = True

    def __init__(self, output_folder, **kwargs):
        super().__init__(None, **kwargs)
        self.target_path = Path(output_folder)
        self.target_path.mkdir(parents=True, exist_ok=True)
        self.writers: Dict[str, CSVContext] = {}

    def open_writer(self, table_name, fields):
        file = open(self.target_path / f"{table_name}.csv", "w", newline="")
        writer = csv.DictWriter(file, list(fields))
        writer.writeheader()
        return CSVContext(dictwriter=writer, file=file)

    def write_single_row(self, tablename: str, row: Dict) -> None:
        if tablename not in self.writers:
            self.writers[tablename] = self.open_writer(tablename, row.keys())
        self.writers[tablename].dictwriter.writerow(row)

    def close(self, **kwargs) -> Optional[Sequence[str]]:
        messages = []
        for context in self.writers.values():
            context.file.close()
            messages.append(f"Created {context.file.name}")
        return messages


def json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Cannot serialize {type(value).__name__} to JSON")


def write_json(path, obj) -> str:
    "Deterministic JSON: sorted keys, two-space indent, repr floats"
    path = Path(path)
    path.write_text(
        json.dumps(obj, sort_keys=True, indent=2, default=json_default) + "\n"
    )
    return f"Created {path}"


# Binary rollout traces: B, K, N as little-endian int64, then B * (K + 1)
# little-endian int64 node ids in trajectory-major order.
TRACE_HEADER = struct.Struct("<qqq")


def write_trace(path, batch: RolloutBatch) -> str:
    path = Path(path)
    with path.open("wb") as f:
        f.write(TRACE_HEADER.pack(batch.size, batch.K, batch.node_count))
        f.write(np.ascontiguousarray(batch.trajectories, dtype="<i8").tobytes())
    return f"Created {path}"


def read_trace(
    path, graph: DirectedGraph, direction: str = FORWARD, seed: int = 0
) -> RolloutBatch:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < TRACE_HEADER.size:
        raise BridgeParseError("Trace file is too short for its header", str(path))
    B, K, N = TRACE_HEADER.unpack_from(data)
    if N != graph.node_count:
        raise BridgeParseError(
            f"Trace was written for {N} nodes; the graph has {graph.node_count}", str(path)
        )
    expected = TRACE_HEADER.size + 8 * B * (K + 1)
    if len(data) != expected:
        raise BridgeParseError(
            f"Trace holds {len(data)} bytes; its header implies {expected}", str(path)
        )
    trajectories = np.frombuffer(data, dtype="<i8", offset=TRACE_HEADER.size)
    return RolloutBatch(
        trajectories=trajectories.reshape(B, K + 1).astype(np.int64),
        direction=direction,
        K=K,
        dt=1.0 / K,
        seed=seed,
        graph=graph,
    )


def trace_rows(batch: RolloutBatch) -> T.Iterator[Dict]:
    for traj_id, path in enumerate(batch.trajectories.tolist()):
        for step, node in enumerate(path):
            yield {"traj_id": traj_id, "step": step, "node": node}
