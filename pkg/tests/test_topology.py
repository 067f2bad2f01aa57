import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from conftest import make_graph
from oracles import brute_force_persistence, pi_quadrature, random_graph
from lptgnn.autodiff import ContractError
from lptgnn.topology import (
    TopologyConfig,
    betweenness,
    build_pi_tensor,
    closeness,
    compute_filtration,
    eigenvector,
    filtration_window,
    persistence_image,
    sublevel_persistence_h0,
    sublevel_persistence_h1,
)

PATH3 = make_graph(3, [(0, 1), (1, 2)])


def to_nx(g):
    h = nx.Graph()
    h.add_nodes_from(range(g.node_count))
    h.add_edges_from(map(tuple, g.edges.tolist()))
    return h


def random_small_graph(rng, max_nodes=8):
    n, edges = random_graph(rng, max_nodes)
    return make_graph(n, edges)


class TestFiltrations:
    def test_path_examples(self):
        np.testing.assert_array_equal(compute_filtration(PATH3, "degree").values, [1, 2, 1])
        np.testing.assert_array_equal(compute_filtration(PATH3, "betweenness").values, [0, 1, 0])
        np.testing.assert_array_equal(compute_filtration(make_graph(1, []), "closeness").values, [0])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_against_networkx(self, seed):
        g = random_small_graph(np.random.default_rng(seed))
        h = to_nx(g)
        bc = nx.betweenness_centrality(h, normalized=False)
        np.testing.assert_allclose(betweenness(g), [bc[v] for v in range(g.node_count)], atol=1e-12)
        # networkx scales by the reachable count; the convention here uses N - 1 throughout
        for v in range(g.node_count):
            dist = nx.single_source_shortest_path_length(h, v)
            total = sum(dist.values())
            expected = (g.node_count - 1) / total if total else 0.0
            assert closeness(g)[v] == pytest.approx(expected, abs=1e-12)

    def test_eigenvector_is_principal(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = random_small_graph(rng)
            m = g.adjacency() + np.eye(g.node_count)
            vals, vecs = np.linalg.eigh(m)
            x = eigenvector(g)
            assert np.linalg.norm(x) == pytest.approx(1.0)
            assert x @ m @ x == pytest.approx(vals[-1], rel=1e-8) or vals[-1] - vals[-2] < 1e-9

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            compute_filtration(PATH3, "pagerank")


class TestPersistence:
    def test_path_degree(self):
        assert sublevel_persistence_h0(PATH3, [1, 2, 1]).sorted_points() == [(1, 2), (1, 2), (2, 2)]
        assert len(sublevel_persistence_h1(PATH3, [1, 2, 1])) == 0

    def test_single_and_isolated(self):
        assert sublevel_persistence_h0(make_graph(1, []), [5]).sorted_points() == [(5, 5)]
        assert sublevel_persistence_h0(make_graph(2, []), [1, 2]).sorted_points() == [(1, 2), (2, 2)]

    def test_cycles(self):
        tri = make_graph(3, [(0, 1), (1, 2), (0, 2)])
        assert sublevel_persistence_h1(tri, [1, 1, 1]).sorted_points() == [(1, 1)]
        bowtie = make_graph(5, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (2, 4)])
        assert sublevel_persistence_h1(bowtie, [2] * 5).sorted_points() == [(2, 2), (2, 2)]

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            sublevel_persistence_h0(PATH3, [1, 2])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n, edges = random_graph(rng, 6)
        f = rng.integers(0, 4, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        g = make_graph(n, edges)
        h0, h1 = brute_force_persistence(n, edges, f)
        assert sublevel_persistence_h0(g, f).sorted_points() == h0
        assert sublevel_persistence_h1(g, f).sorted_points() == h1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-50, 50))
    def test_counts_and_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        g = random_small_graph(rng)
        f = rng.normal(size=g.node_count)
        h0 = sublevel_persistence_h0(g, f)
        h1 = sublevel_persistence_h1(g, f)
        comps = nx.number_connected_components(to_nx(g))
        assert len(h0) == g.node_count
        assert len(h1) == g.edge_count - g.node_count + comps
        assert (h0.points[:, 1] >= h0.points[:, 0]).all()
        shifted = sublevel_persistence_h0(g, f + c).points
        np.testing.assert_array_equal(
            sorted(map(tuple, shifted.tolist())),
            sorted(map(tuple, (h0.points + c).tolist())),
        )


class TestPersistenceImage:
    def test_empty_and_diagonal(self):
        img = persistence_image(np.zeros((0, 2)), 4, (0.5, 0.5), "linear", ((0, 2), (0, 2)))
        np.testing.assert_array_equal(img.pixels, np.zeros((4, 4)))
        img = persistence_image(np.array([[1.0, 1.0]]), 4, (0.5, 0.5), "linear", ((0, 2), (0, 2)))
        np.testing.assert_array_equal(img.pixels, np.zeros((4, 4)))

    def test_single_pixel_mass(self):
        img = persistence_image(np.array([[1.0, 2.0]]), 1, (0.5, 0.5), "constant", ((0, 2), (0, 2)))
        expected = (ndtr(2.0) - ndtr(-2.0)) ** 2
        assert img.pixels[0, 0] == pytest.approx(expected, abs=1e-15)
        # the quoted four-digit figure 0.9109 is a rounding of 0.91107
        assert img.pixels[0, 0] == pytest.approx(0.9109, abs=5e-4)

    def test_layout_rows_are_persistence(self):
        img = persistence_image(np.array([[0.5, 2.0]]), 2, (0.05, 0.05), "constant", ((0, 2), (0, 2)))
        # birth 0.5 -> first column, persistence 1.5 -> second row
        assert img.pixels[1, 0] > 0.99

    def test_matches_quadrature(self):
        rng = np.random.default_rng(3)
        pts = np.sort(rng.uniform(0, 2, (3, 2)), axis=1)
        window = ((0.0, 2.0), (0.0, 2.0))
        ours = persistence_image(pts, 3, (0.4, 0.3), "linear", window).pixels
        np.testing.assert_allclose(ours, pi_quadrature(pts, 3, (0.4, 0.3), "linear", window), atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_linearity_and_nonnegativity(self, seed):
        rng = np.random.default_rng(seed)
        a = np.sort(rng.uniform(-1, 3, (int(rng.integers(0, 5)), 2)), axis=1)
        b = np.sort(rng.uniform(-1, 3, (int(rng.integers(0, 5)), 2)), axis=1)
        kw = dict(resolution=6, bandwidths=(0.3, 0.2), weight_kind="linear", window=((-1, 3), (0, 4)))
        ia = persistence_image(a, **kw).pixels
        ib = persistence_image(b, **kw).pixels
        iab = persistence_image(np.vstack([a, b]), **kw).pixels
        np.testing.assert_allclose(iab, ia + ib, rtol=1e-12, atol=1e-15)
        assert (iab >= 0).all()

    def test_invalid_arguments(self):
        with pytest.raises(ContractError):
            persistence_image(np.zeros((0, 2)), 4, (0.0, 0.5), "linear", ((0, 1), (0, 1)))
        with pytest.raises(ContractError):
            persistence_image(np.zeros((0, 2)), 4, (0.5, 0.5), "linear", ((1, 1), (0, 1)))


class TestPITensor:
    def test_shape_and_determinism(self, mutag):
        g = mutag.graphs[0]
        cfg = TopologyConfig()
        t1, t2 = build_pi_tensor(g, cfg), build_pi_tensor(g, cfg)
        assert t1.shape == (4, 1, 50, 50)
        assert t1.tobytes() == t2.tobytes()
        assert build_pi_tensor(g, TopologyConfig(q=2, resolution=8)).shape == (4, 2, 8, 8)

    def test_edgeless_graph_is_finite(self):
        t = build_pi_tensor(make_graph(4, []), TopologyConfig(resolution=10))
        assert np.isfinite(t).all()

    def test_window(self):
        assert filtration_window(np.array([1.0, 3.0])) == ((1.0, 3.0), (0.0, 2.0))
        assert filtration_window(np.array([2.0, 2.0])) == ((1.5, 2.5), (0.0, 1.0))

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TopologyConfig(q=3)
        with pytest.raises(ContractError):
            TopologyConfig(filtrations=("degree", "katz"))
