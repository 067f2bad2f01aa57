import os
from pathlib import Path

import numpy as np
import pytest

from lptgnn.graphio import AttributedGraph, DomainDataset, parse_tudataset

REPO = Path(__file__).resolve().parent.parent
DATA_ROOT = Path(os.environ.get("LPTGNN_DATA", REPO / "data"))

_ACCEPTANCE = []


def record_acceptance(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def make_graph(n, edges, features=None, label=0):
    edges = np.array(sorted(tuple(sorted(e)) for e in edges), dtype=np.int64).reshape(-1, 2)
    x = np.ones((n, 1)) if features is None else np.asarray(features, dtype=float)
    return AttributedGraph(n, edges, x, label)


def random_dataset(rng, n_graphs, feature_width=3, class_count=2, max_nodes=8, name="rand"):
    graphs = []
    for i in range(n_graphs):
        n = int(rng.integers(2, max_nodes + 1))
        edges = {(u, u + 1) for u in range(n - 1)}
        for _ in range(int(rng.integers(0, n))):
            u, v = sorted(rng.choice(n, 2, replace=False))
            edges.add((int(u), int(v)))
        x = np.eye(feature_width)[rng.integers(0, feature_width, n)]
        graphs.append(make_graph(n, edges, x, i % class_count))
    return DomainDataset(tuple(graphs), "source", class_count, name)


@pytest.fixture(scope="session")
def mutag():
    path = DATA_ROOT / "MUTAG"
    if not path.is_dir():
        pytest.skip(f"MUTAG not present under {DATA_ROOT}")
    return parse_tudataset(path, "MUTAG")
