import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cp_full, tt_full, tucker_full
from lptgnn.autodiff import ContractError
from lptgnn.tensor import (
    LowRankWeight,
    ShapeError,
    TTLConfig,
    contract,
    default_ranks,
    init_ttl,
    init_weight,
    materialize,
    ttl_forward,
    tucker_parameter_count,
)


def oracle_full(w):
    f = w.factors
    if w.structure == "tucker":
        return tucker_full(f[0], f[1:])
    if w.structure == "cp":
        return cp_full(f[0], f[1:])
    if w.structure == "tt":
        return tt_full(f)
    return f[0]


def dense_contract(full, x, k):
    return np.tensordot(x, full, axes=(list(range(x.ndim - k, x.ndim)), list(range(k))))


def random_weight(rng, structure, max_modes=4):
    k = int(rng.integers(1, max_modes))
    p = int(rng.integers(1, max_modes - k + 1))
    inp = tuple(int(d) for d in rng.integers(1, 5, k))
    out = tuple(int(d) for d in rng.integers(1, 5, p))
    dims = inp + out
    if structure == "tucker":
        ranks = tuple(int(rng.integers(1, d + 2)) for d in dims)
    elif structure == "cp":
        ranks = (int(rng.integers(1, 5)),)
    elif structure == "tt":
        ranks = tuple(int(r) for r in rng.integers(1, 4, len(dims) - 1))
    else:
        ranks = ()
    w = init_weight(structure, inp, out, ranks, rng)
    # replace structured init by generic random factors
    w.factors = [rng.normal(size=np.shape(f)) for f in w.factors]
    return w


class TestMaterialize:
    def test_scalar_tucker(self):
        w = LowRankWeight("tucker", (1,), (1,), [np.array([[3.0]]), np.array([[2.0]]), np.array([[5.0]])],
                          (1, 1))
        assert materialize(w)[0, 0] == 30.0

    def test_rank_one_tt_is_outer_product(self):
        a, b, c = np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([0.5, 4.0])
        w = LowRankWeight("tt", (2, 2), (2,), [a.reshape(1, 2, 1), b.reshape(1, 2, 1), c.reshape(1, 2, 1)],
                          (1, 1))
        np.testing.assert_array_equal(materialize(w), np.einsum("i,j,k->ijk", a, b, c))

    def test_cp_rank_two_brute_force(self):
        rng = np.random.default_rng(0)
        lam = rng.normal(size=2)
        us = [rng.normal(size=(2, 2)) for _ in range(3)]
        w = LowRankWeight("cp", (2, 2), (2,), [lam] + us, (2,))
        brute = np.zeros((2, 2, 2))
        for r in range(2):
            for i in range(2):
                for j in range(2):
                    for k in range(2):
                        brute[i, j, k] += lam[r] * us[0][i, r] * us[1][j, r] * us[2][k, r]
        np.testing.assert_allclose(materialize(w), brute, rtol=1e-14)

    @pytest.mark.parametrize("structure", ["tucker", "cp", "tt", "dense"])
    def test_against_oracle(self, structure):
        rng = np.random.default_rng(1)
        for _ in range(20):
            w = random_weight(rng, structure)
            np.testing.assert_allclose(materialize(w), oracle_full(w), rtol=1e-12, atol=1e-12)


class TestContract:
    def test_identity_tucker(self):
        dims = (2, 3)
        core = np.einsum("ac,bd->abcd", np.eye(2), np.eye(3))
        w = LowRankWeight("tucker", dims, dims, [core] + [np.eye(d) for d in dims * 2], dims * 2)
        x = np.random.default_rng(0).normal(size=(4, 2, 3))
        np.testing.assert_allclose(contract(w, x), x, rtol=1e-14)

    def test_cp_rank_one_by_hand(self):
        u, v = np.array([2.0, 3.0]), np.array([5.0, 7.0])
        w = LowRankWeight("cp", (2,), (2,), [np.array([1.0]), u[:, None], v[:, None]], (1,))
        np.testing.assert_array_equal(materialize(w), np.outer(u, v))
        np.testing.assert_array_equal(contract(w, np.array([[1.0, 0.0]])), [v * u[0]])

    @pytest.mark.parametrize("structure", ["tucker", "cp", "tt", "dense"])
    def test_matches_dense_oracle(self, structure):
        rng = np.random.default_rng(2)
        for _ in range(30):
            w = random_weight(rng, structure)
            x = rng.normal(size=(int(rng.integers(1, 4)),) + w.input_shape)
            ref = dense_contract(oracle_full(w), x, len(w.input_shape))
            got = contract(w, x)
            assert got.shape == ref.shape
            np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["tucker", "cp", "tt"]), st.integers(0, 10**6),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, structure, seed, a, b):
        rng = np.random.default_rng(seed)
        w = random_weight(rng, structure)
        x = rng.normal(size=(2,) + w.input_shape)
        y = rng.normal(size=(2,) + w.input_shape)
        lhs = contract(w, a * x + b * y)
        rhs = a * contract(w, x) + b * contract(w, y)
        scale = max(np.abs(rhs).max(), np.abs(lhs).max(), 1e-300)
        assert np.abs(lhs - rhs).max() <= 1e-10 * scale

    def test_mode_mismatch(self):
        w = init_weight("tucker", (2, 3), (2,))
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            contract(w, np.zeros((4, 3, 2)))

    def test_bad_factor_shapes(self):
        with pytest.raises(ContractError):
            LowRankWeight("tucker", (2,), (2,), [np.zeros((1, 1)), np.zeros((2, 1)), np.zeros((3, 1))], (1, 1))


class TestTTL:
    def test_zero_weights_zero_output(self):
        cfg = TTLConfig(((2, 3), (2, 2), (4,)))
        weights, biases = init_ttl(cfg, np.random.default_rng(0))
        for w in weights:
            w.factors = [np.zeros_like(f) for f in w.factors]
        out = ttl_forward(cfg, weights, biases, np.ones((5, 2, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 4)))

    def test_identity_layers_pass_nonnegative_input(self):
        shape = (2, 3)
        cfg = TTLConfig((shape, shape, shape), structure="dense")
        eye = np.einsum("ac,bd->abcd", np.eye(2), np.eye(3))
        weights = [LowRankWeight("dense", shape, shape, [eye]) for _ in range(2)]
        biases = [np.zeros(shape)] * 2
        x = np.abs(np.random.default_rng(0).normal(size=(3,) + shape))
        np.testing.assert_array_equal(ttl_forward(cfg, weights, biases, x), x)

    def test_final_layer_is_linear(self):
        shape = (2,)
        cfg = TTLConfig((shape, shape, shape), structure="dense")
        weights = [LowRankWeight("dense", shape, shape, [np.eye(2)]),
                   LowRankWeight("dense", shape, shape, [-np.eye(2)])]
        out = ttl_forward(cfg, weights, [np.zeros(2)] * 2, np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out, [[-1.0, -2.0]])

    def test_chain_mismatch_names_layer(self):
        cfg = TTLConfig(((2,), (3,), (2,)))
        weights, biases = init_ttl(cfg, np.random.default_rng(0))
        weights[1] = init_weight("tucker", (4,), (2,))
        with pytest.raises(ShapeError, match="layer 1"):
            ttl_forward(cfg, weights, biases, np.zeros((1, 2)))

    def test_needs_one_activated_layer(self):
        with pytest.raises(ContractError):
            TTLConfig(((2,), (2,)))


class TestParameterCount:
    def test_tucker_count_formula(self):
        w = init_weight("tucker", (3, 6, 6), (3, 6, 6))
        assert w.ranks == default_ranks("tucker", (3, 6, 6, 3, 6, 6)) == (2, 3, 3, 2, 3, 3)
        assert w.parameter_count() == tucker_parameter_count(w.modes, w.ranks)
        assert w.parameter_count() < math.prod(w.modes)

    @given(st.lists(st.integers(1, 8), min_size=1, max_size=5), st.integers(0, 10**6))
    def test_count_is_core_plus_loadings(self, dims, seed):
        rng = np.random.default_rng(seed)
        ranks = [int(rng.integers(1, d + 1)) for d in dims]
        expected = math.prod(ranks) + sum(d * r for d, r in zip(dims, ranks))
        assert tucker_parameter_count(dims, ranks) == expected

    def test_reshape_round_trip(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(x.reshape(6, 4).reshape(2, 3, 4), x)
