import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent.parent))

from graphbridge.fixtures import load_fixture  # noqa: E402
from graphbridge.graph_core import DirectedGraph, RateGenerator  # noqa: E402


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="function")
def chain():
    return load_fixture("three_node_chain")


@pytest.fixture(scope="function")
def single_node():
    return load_fixture("single_node")


@pytest.fixture(scope="function")
def two_node():
    "0 <-> 1 with rate 1 both ways"
    graph = DirectedGraph(2, [(0, 1), (1, 0)])
    return RateGenerator(graph, [1.0, 1.0])


@pytest.fixture(scope="function")
def random_generator(rng):
    """Factory for random sparse generators.

    Every node gets an edge to its successor on a ring, so the graph is
    strongly connected, plus a few random extra edges.
    """

    def make(node_count=5, extra_edges=4, max_rate=2.0):
        pairs = {(x, (x + 1) % node_count) for x in range(node_count)}
        while len(pairs) < node_count + extra_edges and node_count > 2:
            x, y = rng.integers(node_count, size=2)
            if x != y:
                pairs.add((int(x), int(y)))
        edges = sorted(pairs)
        rates = rng.uniform(0.1, max_rate, size=len(edges))
        return RateGenerator(DirectedGraph(node_count, edges), rates)

    return make


@pytest.fixture(scope="function")
def write_config(tmp_path):
    "Write a run configuration (as YAML) and return its path"

    def write(data, name="run.yml"):
        path = Path(tmp_path) / name
        path.write_text(yaml.safe_dump(data))
        return path

    return write


@pytest.fixture(scope="function")
def small_train():
    "A fast training block for end-to-end tests"
    return {"iterations": 3, "rollouts": 64, "inner_steps": 2, "seed": 0}
