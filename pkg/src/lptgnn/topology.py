"""Vertex filtrations, sublevel-set persistence of graphs, persistence images."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .autodiff import ContractError

FILTRATIONS = ("degree", "betweenness", "eigenvector", "closeness")
WEIGHTS = ("linear", "constant")


@dataclass(frozen=True)
class Filtration:
    kind: str
    values: np.ndarray


@dataclass(frozen=True)
class PersistenceDiagram:
    points: np.ndarray  # (n, 2) birth, death
    homology_dimension: int = 0

    def __len__(self):
        return len(self.points)

    def sorted_points(self):
        if not len(self.points):
            return []
        return sorted(map(tuple, self.points.tolist()))


@dataclass(frozen=True)
class PersistenceImage:
    pixels: np.ndarray  # (P, P); row = persistence bin, column = birth bin
    resolution: int
    bandwidths: tuple
    weight_kind: str
    window: tuple


@dataclass(frozen=True)
class TopologyConfig:
    filtrations: tuple = FILTRATIONS
    q: int = 1
    resolution: int = 50
    weight_kind: str = "linear"
    bandwidth_scale: float = 1.0  # bandwidth = scale * window width / P

    def __post_init__(self):
        object.__setattr__(self, "filtrations", tuple(self.filtrations))
        for kind in self.filtrations:
            if kind not in FILTRATIONS:
                raise ContractError(f"unknown filtration {kind!r}")
        if self.q not in (1, 2):
            raise ContractError("q must be 1 (H0) or 2 (H0, H1)")
        if self.weight_kind not in WEIGHTS:
            raise ContractError(f"unknown weight {self.weight_kind!r}")
        if self.resolution < 1:
            raise ContractError("resolution must be >= 1")

    @property
    def k(self):
        return len(self.filtrations)


# ------------------------------------------------------------- filtrations


def _neighbors(graph):
    nbrs = [[] for _ in range(graph.node_count)]
    for u, v in graph.edges:
        nbrs[u].append(int(v))
        nbrs[v].append(int(u))
    return nbrs


def _bfs(nbrs, s):
    dist = [-1] * len(nbrs)
    dist[s] = 0
    queue = deque([s])
    while queue:
        u = queue.popleft()
        for w in nbrs[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def betweenness(graph):
    """Brandes' algorithm, unnormalised, each unordered pair counted once."""
    n = graph.node_count
    nbrs = _neighbors(graph)
    cb = np.zeros(n)
    for s in range(n):
        stack = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = [-1] * n
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in nbrs[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                cb[w] += delta[w]
    return cb / 2.0


def closeness(graph):
    """(N - 1) / sum of distances to reachable nodes; 0 for isolated nodes."""
    n = graph.node_count
    nbrs = _neighbors(graph)
    out = np.zeros(n)
    for s in range(n):
        total = sum(d for d in _bfs(nbrs, s) if d > 0)
        out[s] = (n - 1) / total if total > 0 else 0.0
    return out


def eigenvector(graph, tol=1e-12, max_iter=10_000):
    """Power iteration on A + I from the all-ones vector, L2-normalised."""
    m = graph.adjacency() + np.eye(graph.node_count)
    x = np.ones(graph.node_count) / np.sqrt(graph.node_count)
    for _ in range(max_iter):
        y = m @ x
        y /= np.linalg.norm(y)
        if np.abs(y - x).max() < tol:
            return y
        x = y
    return x


def compute_filtration(graph, kind):
    if kind == "degree":
        values = graph.degrees()
    elif kind == "betweenness":
        values = betweenness(graph)
    elif kind == "closeness":
        values = closeness(graph)
    elif kind == "eigenvector":
        values = eigenvector(graph)
    else:
        raise ContractError(f"unknown filtration {kind!r}")
    return Filtration(kind, np.asarray(values, dtype=np.float64))


# -------------------------------------------------------------- persistence


def _values(graph, filtration):
    f = filtration.values if isinstance(filtration, Filtration) else np.asarray(filtration, float)
    if f.shape != (graph.node_count,):
        raise ContractError(f"filtration has {f.shape[0]} values for {graph.node_count} nodes")
    return f


def _sorted_edges(graph, f):
    if not graph.edge_count:
        return []
    e = graph.edges
    w = np.maximum(f[e[:, 0]], f[e[:, 1]])
    order = np.lexsort((e[:, 1], e[:, 0], w))
    return [(float(w[i]), int(e[i, 0]), int(e[i, 1])) for i in order]


def _persistence(graph, f):
    """Union-find sweep; returns (H0 points, H1 points) with capped essentials."""
    n = graph.node_count
    parent = list(range(n))
    cap = float(f.max())

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    # root's key = (birth value, birth vertex); the smaller key is elder
    key = [(float(f[v]), v) for v in range(n)]
    h0, h1 = [], []
    for value, u, v in _sorted_edges(graph, f):
        ru, rv = find(u), find(v)
        if ru == rv:
            h1.append((value, cap))
            continue
        elder, younger = (ru, rv) if key[ru] < key[rv] else (rv, ru)
        h0.append((key[younger][0], value))
        parent[younger] = elder
    for v in range(n):
        if find(v) == v:
            h0.append((key[v][0], cap))
    return np.array(h0, dtype=np.float64).reshape(-1, 2), np.array(h1, dtype=np.float64).reshape(-1, 2)


def sublevel_persistence_h0(graph, filtration):
    h0, _ = _persistence(graph, _values(graph, filtration))
    return PersistenceDiagram(h0, 0)


def sublevel_persistence_h1(graph, filtration):
    _, h1 = _persistence(graph, _values(graph, filtration))
    return PersistenceDiagram(h1, 1)


# --------------------------------------------------------- persistence images


def persistence_image(diagram, resolution, bandwidths, weight_kind="linear", window=((0, 1), (0, 1))):
    """Rasterise a diagram over ``window`` in the (birth, persistence) plane.

    Each pixel holds the exact integral of the weighted Gaussian surface
    over its rectangle, computed from per-axis normal CDF differences.
    """
    (x0, x1), (y0, y1) = window
    dx, dy = bandwidths
    if resolution < 1 or dx <= 0 or dy <= 0 or not (x1 > x0 and y1 > y0):
        raise ContractError("persistence_image: invalid resolution, bandwidths or window")
    if weight_kind not in WEIGHTS:
        raise ContractError(f"unknown weight {weight_kind!r}")
    pts = diagram.points if isinstance(diagram, PersistenceDiagram) else np.asarray(diagram, float)
    pix = np.zeros((resolution, resolution))
    if len(pts):
        mx = pts[:, 0]
        my = pts[:, 1] - pts[:, 0]
        g = my if weight_kind == "linear" else np.ones_like(mx)
        xe = np.linspace(x0, x1, resolution + 1)
        ye = np.linspace(y0, y1, resolution + 1)
        # (n_points, P) mass of each point's marginal inside each bin
        mass_x = np.diff(ndtr((xe[None, :] - mx[:, None]) / dx), axis=1)
        mass_y = np.diff(ndtr((ye[None, :] - my[:, None]) / dy), axis=1)
        pix = (mass_y * g[:, None]).T @ mass_x
    return PersistenceImage(pix, resolution, (float(dx), float(dy)), weight_kind,
                            ((float(x0), float(x1)), (float(y0), float(y1))))


def filtration_window(values):
    """Birth axis spans [min f, max f]; persistence axis spans [0, max f - min f]."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo <= 0:
        return (lo - 0.5, hi + 0.5), (0.0, 1.0)
    return (lo, hi), (0.0, hi - lo)


def graph_diagrams(graph, config):
    """Per-filtration (Filtration, [H0, H1?]) pairs in configuration order."""
    out = []
    for kind in config.filtrations:
        filt = compute_filtration(graph, kind)
        h0, h1 = _persistence(graph, filt.values)
        dgms = [PersistenceDiagram(h0, 0)]
        if config.q == 2:
            dgms.append(PersistenceDiagram(h1, 1))
        out.append((filt, dgms))
    return out


def build_pi_tensor(graph, config):
    """K x Q x P x P stack of persistence images for one graph."""
    p = config.resolution
    out = np.zeros((config.k, config.q, p, p))
    for i, (filt, dgms) in enumerate(graph_diagrams(graph, config)):
        window = filtration_window(filt.values)
        bw = tuple(config.bandwidth_scale * (hi - lo) / p for lo, hi in window)
        for j, dgm in enumerate(dgms):
            out[i, j] = persistence_image(dgm, p, bw, config.weight_kind, window).pixels
    return out


def build_pi_tensors(graphs, config):
    return np.stack([build_pi_tensor(g, config) for g in graphs]) if graphs else np.zeros(
        (0, config.k, config.q, config.resolution, config.resolution))


def diagram_json(diagram):
    return [[float(b), float(d), int(diagram.homology_dimension)] for b, d in diagram.points]


def image_json(image):
    return {
        "pixels": image.pixels.tolist(),
        "resolution": image.resolution,
        "bandwidths": list(image.bandwidths),
        "weight": image.weight_kind,
        "window": {"birth": list(image.window[0]), "persistence": list(image.window[1])},
        "layout": "row-major; rows index persistence bins, columns index birth bins",
    }
