"""Potential-table checkpoints.

Layout: the magic line ``GRAPHBRIDGE-CKPT 1``, an 8-byte little-endian
header length, a UTF-8 JSON header, then the arrays as consecutive
little-endian float64 blocks in header order. The header carries
``K``, ``N``, ``dt``, ``iteration`` and one ``{name, shape}`` entry per array.
"""
import json
import struct
import typing as T
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphbridge.exceptions import BridgeParseError
from graphbridge.potentials import PotentialTable

MAGIC = b"GRAPHBRIDGE-CKPT 1\n"


@dataclass
class Checkpoint:
    tables: PotentialTable
    iteration: int
    optimizer_state: T.Dict[str, T.Dict[str, np.ndarray]] = field(default_factory=dict)
    header: T.Dict[str, T.Any] = field(default_factory=dict)


def save_checkpoint(
    path: T.Union[str, Path],
    tables: PotentialTable,
    iteration: int,
    optimizer_state: T.Mapping[str, T.Mapping[str, np.ndarray]] = None,
    extra: T.Mapping[str, T.Any] = None,
) -> Path:
    arrays = [("Y", tables.Y), ("Yhat", tables.Yhat)]
    for table_name, state in sorted((optimizer_state or {}).items()):
        for key, value in sorted(state.items()):
            arrays.append((f"adam.{table_name}.{key}", np.asarray(value, dtype=float)))
    header = {
        "K": tables.K,
        "N": tables.node_count,
        "dt": tables.dt,
        "iteration": int(iteration),
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
        **dict(extra or {}),
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        for _, array in arrays:
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: T.Union[str, Path]) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise BridgeParseError("Not a graphbridge checkpoint", str(path))
    offset = len(MAGIC)
    try:
        (length,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        header = json.loads(data[offset : offset + length].decode("utf-8"))
        offset += length
        values = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            block = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            values[entry["name"]] = block.reshape(shape).astype(float)
            offset += 8 * count
    except (struct.error, ValueError, KeyError) as e:
        raise BridgeParseError(f"Corrupt checkpoint: {e}", str(path)) from e
    if offset != len(data):
        raise BridgeParseError("Checkpoint has trailing bytes", str(path))

    tables = PotentialTable(header["K"], header["N"], values["Y"], values["Yhat"])
    optimizer_state: T.Dict[str, T.Dict[str, np.ndarray]] = {}
    for name, value in values.items():
        if name.startswith("adam."):
            _, table_name, key = name.split(".", 2)
            optimizer_state.setdefault(table_name, {})[key] = value
    return Checkpoint(
        tables=tables,
        iteration=int(header["iteration"]),
        optimizer_state=optimizer_state,
        header=header,
    )
