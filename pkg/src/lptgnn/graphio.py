"""TUDataset ingestion, domain splits and paired mini-batch sampling."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Base class for dataset problems (exit code 2 at the CLI)."""


class FormatError(DataError):
    pass


class ParseError(DataError):
    pass


class GraphIndexError(DataError):
    pass


class SizeError(DataError):
    pass


class UnsupportedError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    node_count: int
    edges: np.ndarray  # (E, 2) int, u < v, sorted
    node_features: np.ndarray  # (N, F)
    graph_label: int | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.node_features, dtype=np.float64)
        n = int(self.node_count)
        if n < 1:
            raise SizeError("graph must have at least one node")
        if feats.ndim != 2 or feats.shape[0] != n:
            raise FormatError(f"node_features must have {n} rows, got shape {feats.shape}")
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise GraphIndexError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise FormatError("self-loops are not allowed")
            edges = np.sort(edges, axis=1)
            uniq = np.unique(edges, axis=0)
            if len(uniq) != len(edges):
                raise FormatError("duplicate edges")
            edges = uniq
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_features", feats)

    @property
    def edge_count(self):
        return len(self.edges)

    def adjacency(self):
        a = np.zeros((self.node_count, self.node_count))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.node_count).astype(np.float64)

    def edge_density(self):
        n = self.node_count
        return 0.0 if n < 2 else self.edge_count / (n * (n - 1) / 2)

    def without_label(self):
        return dataclasses.replace(self, graph_label=None)

    def permuted(self, perm):
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm)
        feats = np.empty_like(self.node_features)
        feats[perm] = self.node_features
        return AttributedGraph(self.node_count, perm[self.edges], feats, self.graph_label)

    def same_as(self, other):
        return (
            self.node_count == other.node_count
            and self.graph_label == other.graph_label
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_features, other.node_features)
        )


@dataclass(frozen=True)
class DomainDataset:
    graphs: tuple
    role: str = "source"
    class_count: int = 2
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be source or target, got {self.role!r}")
        widths = {g.node_features.shape[1] for g in self.graphs}
        if len(widths) > 1:
            raise FormatError(f"inconsistent feature widths {sorted(widths)}")
        if self.role == "source" and any(g.graph_label is None for g in self.graphs):
            raise FormatError("every source graph needs a label")

    def __len__(self):
        return len(self.graphs)

    @property
    def feature_width(self):
        return self.graphs[0].node_features.shape[1] if self.graphs else 0

    @property
    def labels(self):
        return np.array([-1 if g.graph_label is None else g.graph_label for g in self.graphs])

    def class_counts(self):
        return [int(c) for c in np.bincount(self.labels[self.labels >= 0], minlength=self.class_count)]

    def subset(self, indices, role=None, name=None):
        return DomainDataset(
            tuple(self.graphs[i] for i in indices),
            role or self.role,
            self.class_count,
            self.name if name is None else name,
            dict(self.meta),
        )

    def as_role(self, role):
        return DomainDataset(self.graphs, role, self.class_count, self.name, dict(self.meta))

    def unlabeled(self):
        """Training view of a target domain: every label stripped."""
        return DomainDataset(
            tuple(g.without_label() for g in self.graphs), "target", self.class_count,
            self.name, dict(self.meta),
        )

    def same_as(self, other):
        return (
            len(self) == len(other)
            and self.class_count == other.class_count
            and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))
        )


# ---------------------------------------------------------------- parsing


def _read_int_rows(path, width=None):
    rows = []
    with open(path, newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path.name}:{lineno}: non-integer token in {text!r}") from None
            if width is not None and len(vals) != width:
                raise ParseError(f"{path.name}:{lineno}: expected {width} values, got {len(vals)}")
            rows.append(vals)
    return rows


def _read_labels(path):
    out = []
    with open(path, newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            token = text.split(",")[0].strip()
            try:
                out.append(int(token))
            except ValueError:
                try:
                    val = float(token)
                except ValueError:
                    raise ParseError(f"{path.name}:{lineno}: non-integer token {token!r}") from None
                if not val.is_integer():
                    raise ParseError(f"{path.name}:{lineno}: non-integer token {token!r}")
                out.append(int(val))
    return out


def parse_tudataset(root_path, dataset_name):
    """Read a TUDataset directory into a labelled source-role dataset.

    Node features are one-hot node labels when ``<DS>_node_labels.txt``
    exists, otherwise a single constant column of ones.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FormatError(f"dataset directory not found: {root}")
    files = {k: root / f"{dataset_name}_{k}.txt" for k in ("A", "graph_indicator", "graph_labels")}
    for path in files.values():
        if not path.is_file():
            raise FormatError(f"missing mandatory file {path.name}")

    indicator = [r[0] for r in _read_int_rows(files["graph_indicator"], width=1)]
    graph_labels = _read_labels(files["graph_labels"])
    n_graphs = len(graph_labels)
    if any(g < 1 or g > n_graphs for g in indicator):
        bad = next(i for i, g in enumerate(indicator, start=1) if g < 1 or g > n_graphs)
        raise GraphIndexError(f"{files['graph_indicator'].name}:{bad}: graph id out of range")
    total_nodes = len(indicator)
    indicator = np.asarray(indicator, dtype=np.int64) - 1
    if np.any(np.diff(indicator) < 0):
        raise FormatError(f"{files['graph_indicator'].name}: node ids not grouped by graph")

    edge_rows = []
    with open(files["A"], newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split(",")
            if len(parts) != 2:
                raise ParseError(f"{files['A'].name}:{lineno}: expected 'row, col', got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{files['A'].name}:{lineno}: non-integer token in {text!r}") from None
            if not (1 <= u <= total_nodes and 1 <= v <= total_nodes):
                raise GraphIndexError(
                    f"{files['A'].name}:{lineno}: node {max(u, v) if max(u, v) > total_nodes else min(u, v)} "
                    f"outside 1..{total_nodes}"
                )
            if indicator[u - 1] != indicator[v - 1]:
                raise GraphIndexError(f"{files['A'].name}:{lineno}: edge joins two graphs")
            edge_rows.append((u - 1, v - 1))

    node_label_path = root / f"{dataset_name}_node_labels.txt"
    if node_label_path.is_file():
        node_labels = np.asarray(_read_labels(node_label_path), dtype=np.int64)
        if len(node_labels) != total_nodes:
            raise FormatError(
                f"{node_label_path.name}: {len(node_labels)} lines for {total_nodes} nodes"
            )
        values = np.unique(node_labels)
        one_hot = np.zeros((total_nodes, len(values)))
        one_hot[np.arange(total_nodes), np.searchsorted(values, node_labels)] = 1.0
        features = one_hot
    else:
        features = np.ones((total_nodes, 1))

    raw_classes = sorted(set(graph_labels))
    remap = {raw: i for i, raw in enumerate(raw_classes)}

    starts = np.searchsorted(indicator, np.arange(n_graphs), side="left")
    ends = np.searchsorted(indicator, np.arange(n_graphs), side="right")
    per_graph = [set() for _ in range(n_graphs)]
    for u, v in edge_rows:
        if u == v:
            continue
        g = indicator[u]
        per_graph[g].add((min(u, v) - starts[g], max(u, v) - starts[g]))

    graphs = []
    for g in range(n_graphs):
        n = int(ends[g] - starts[g])
        if n == 0:
            raise FormatError(f"graph {g + 1} has no nodes")
        edges = np.array(sorted(per_graph[g]), dtype=np.int64).reshape(-1, 2)
        graphs.append(AttributedGraph(n, edges, features[starts[g]:ends[g]], remap[graph_labels[g]]))
    return DomainDataset(
        tuple(graphs), "source", len(raw_classes), dataset_name,
        {
            "raw_labels": raw_classes,
            "node_labels": node_label_path.is_file(),
            "node_label_values": values.tolist() if node_label_path.is_file() else [],
        },
    )


def align_domains(*datasets):
    """Re-encode node features of several datasets over one shared label vocabulary.

    Graph-label vocabularies must coincide; node-label one-hot columns are
    laid out over the sorted union of node labels.
    """
    raw = [tuple(d.meta.get("raw_labels", range(d.class_count))) for d in datasets]
    if len(set(raw)) > 1:
        raise UnsupportedError(f"graph label sets differ across domains: {raw}")
    with_labels = [bool(d.meta.get("node_labels")) for d in datasets]
    if not any(with_labels):
        return datasets
    if not all(with_labels):
        raise UnsupportedError("some domains have node labels and others do not")
    union = sorted(set().union(*(d.meta["node_label_values"] for d in datasets)))
    return tuple(reencode_node_labels(d, union) for d in datasets)


def reencode_node_labels(dataset, vocabulary):
    """One-hot node features of ``dataset`` laid out over ``vocabulary`` columns."""
    own = dataset.meta.get("node_label_values") or []
    missing = sorted(set(own) - set(vocabulary))
    if missing:
        raise UnsupportedError(f"node labels {missing} not in vocabulary {list(vocabulary)}")
    cols = np.searchsorted(vocabulary, own)
    graphs = []
    for g in dataset.graphs:
        x = np.zeros((g.node_count, len(vocabulary)))
        x[:, cols] = g.node_features
        graphs.append(AttributedGraph(g.node_count, g.edges, x, g.graph_label))
    return DomainDataset(tuple(graphs), dataset.role, dataset.class_count, dataset.name,
                         {**dataset.meta, "node_label_values": list(vocabulary)})


def write_tudataset(dataset, root_path, dataset_name=None):
    """Serialise back to TUDataset text files (one-hot features become node labels)."""
    name = dataset_name or dataset.name or "DS"
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    raw = dataset.meta.get("raw_labels") or list(range(dataset.class_count))
    offset = 0
    a_lines, ind_lines, lab_lines, node_lines = [], [], [], []
    one_hot = dataset.meta.get("node_labels", dataset.feature_width > 1)
    for gi, g in enumerate(dataset.graphs, start=1):
        for u, v in g.edges:
            a_lines.append(f"{u + 1 + offset}, {v + 1 + offset}")
            a_lines.append(f"{v + 1 + offset}, {u + 1 + offset}")
        ind_lines.extend([str(gi)] * g.node_count)
        lab_lines.append(str(raw[g.graph_label]))
        if one_hot:
            node_lines.extend(str(int(np.argmax(row))) for row in g.node_features)
        offset += g.node_count
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + ("\n" if a_lines else ""))
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_graph_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if one_hot:
        (root / f"{name}_node_labels.txt").write_text("\n".join(node_lines) + "\n")
    return root


# ----------------------------------------------------------------- splits


def split_by_edge_density(dataset):
    """Four contiguous quartile blocks M0..M3 by ascending undirected edge density."""
    n = len(dataset)
    if n < 4:
        raise SizeError(f"need at least 4 graphs to split into quartiles, got {n}")
    density = np.array([g.edge_density() for g in dataset.graphs])
    order = np.argsort(density, kind="stable")
    base, extra = divmod(n, 4)
    sizes = [base + (1 if q < extra else 0) for q in range(4)]
    out, start = [], 0
    for q, size in enumerate(sizes):
        idx = order[start:start + size]
        out.append(dataset.subset(idx, name=f"M{q}"))
        start += size
    return out


def subpopulation_counts(n_neg, n_pos, target_fraction=1 / 3):
    """Class counts for a 1:2 (source) / 2:1 (target) negative:positive split.

    Returns ``((src_neg, src_pos), (tgt_neg, tgt_pos))``.  The target takes
    ``round(target_fraction * total)`` graphs at 2:1; the source takes the
    remaining negatives paired with twice as many positives.  Graphs that
    fit neither ratio are left out.
    """
    total = n_neg + n_pos
    n_t = int(round(target_fraction * total))
    t_neg = min(n_neg, int(round(2 * n_t / 3)))
    t_pos = min(n_pos, n_t - t_neg, max(t_neg // 2, 1))
    s_neg = n_neg - t_neg
    s_pos = min(n_pos - t_pos, 2 * s_neg)
    s_neg = min(s_neg, s_pos // 2) if s_pos < 2 * s_neg else s_neg
    return (s_neg, s_pos), (t_neg, t_pos)


def split_subpopulation_shift(dataset, seed, target_fraction=1 / 3):
    if dataset.class_count != 2:
        raise UnsupportedError(f"subpopulation shift needs C=2, got C={dataset.class_count}")
    labels = dataset.labels
    neg = np.flatnonzero(labels == 0)
    pos = np.flatnonzero(labels == 1)
    (s_neg, s_pos), (t_neg, t_pos) = subpopulation_counts(len(neg), len(pos), target_fraction)
    if min(s_neg, s_pos, t_neg, t_pos) < 1:
        raise SizeError(f"too few graphs for a subpopulation split ({len(neg)} neg, {len(pos)} pos)")
    rng = np.random.default_rng(seed)
    neg = rng.permutation(neg)
    pos = rng.permutation(pos)
    tgt = np.sort(np.concatenate([neg[:t_neg], pos[:t_pos]]))
    src = np.sort(np.concatenate([neg[t_neg:t_neg + s_neg], pos[t_pos:t_pos + s_pos]]))
    meta = {
        "split": "subpopulation", "seed": int(seed),
        "source_counts": [int(s_neg), int(s_pos)], "target_counts": [int(t_neg), int(t_pos)],
        "unused": int(len(labels) - len(src) - len(tgt)),
    }
    source = dataset.subset(src, role="source", name=f"{dataset.name}-src")
    target = dataset.subset(tgt, role="target", name=f"{dataset.name}-tgt")
    source.meta.update(meta)
    target.meta.update(meta)
    return source, target


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class DomainBatch:
    source: tuple  # of (AttributedGraph, label)
    target: tuple  # of AttributedGraph
    source_index: np.ndarray
    target_index: np.ndarray


def batch_index_stream(n_source, n_target, batch_size, rng_seed):
    """Yield ``(source_idx, target_idx)`` arrays forever, epoch by epoch.

    Domains are shuffled by independent generators spawned from the seed,
    so the source order never depends on the target domain.
    """
    if batch_size < 2:
        raise SizeError("batch_size must be >= 2")
    if n_source < 1 or n_target < 1:
        raise SizeError("both domains must be non-empty")
    src_seq, tgt_seq = np.random.SeedSequence(rng_seed).spawn(2)
    rng_s, rng_t = np.random.default_rng(src_seq), np.random.default_rng(tgt_seq)
    n_max = max(n_source, n_target)
    while True:
        order_s = np.resize(rng_s.permutation(n_source), n_max)
        order_t = np.resize(rng_t.permutation(n_target), n_max)
        epoch = []
        for start in range(0, n_max, batch_size):
            stop = min(start + batch_size, n_max)
            if stop - start < 2:
                break
            epoch.append((order_s[start:stop], order_t[start:stop]))
        yield epoch


def sample_batches(source, target, batch_size, rng_seed, epochs=1):
    """Paired mini-batches; the smaller domain cycles within an epoch."""
    if len(source) == 0 or len(target) == 0:
        raise SizeError("empty domain")
    stream = batch_index_stream(len(source), len(target), batch_size, rng_seed)
    for _ in range(epochs):
        for si, ti in next(stream):
            yield DomainBatch(
                tuple((source.graphs[i], source.graphs[i].graph_label) for i in si),
                tuple(target.graphs[i].without_label() for i in ti),
                si, ti,
            )


def split_manifest(name, split, seed, source, target):
    return {
        "dataset": name,
        "split": split,
        "seed": seed,
        "source_size": len(source),
        "target_size": len(target),
        "source_class_counts": source.class_counts(),
        "target_class_counts": target.class_counts(),
        **{k: v for k, v in source.meta.items() if k in ("source_counts", "target_counts", "unused")},
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def default_data_root():
    return os.environ.get("LPTGNN_DATA", "data")
