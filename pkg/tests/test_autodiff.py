import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from lptgnn import autodiff as ad
from lptgnn.autodiff import ContractError, ParamStore, Tape, TrainingError, Var, adam_step


def check_gradients(fn, inputs, step=1e-6, rtol=1e-5, atol=1e-8, seed=0):
    """Compare tape gradients of sum(fn(*inputs) * R) with central differences."""
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    probe = np.asarray(fn(*inputs))
    weights = rng.normal(size=probe.shape)

    def scalar():
        return float((np.asarray(fn(*inputs)) * weights).sum())

    leaves = [Var(x) for x in inputs]
    with Tape() as tape:
        out = ad.sum_(ad.mul(fn(*leaves), weights))
    tape.backward(out)
    for x, leaf in zip(inputs, leaves):
        analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            numeric[idx] = central_difference(scalar, x, idx, step)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


RNG = np.random.default_rng(42)


class TestOperatorGradients:
    def test_elementwise_and_broadcast(self):
        check_gradients(lambda a, b: ad.mul(ad.add(a, b), a), [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])
        check_gradients(lambda a, b: ad.add(a, ad.neg(b)), [RNG.normal(size=(2, 1)), RNG.normal(size=(1, 3))])

    def test_relu_away_from_kink(self):
        x = RNG.normal(size=(4, 5))
        x[np.abs(x) < 0.05] = 0.3
        check_gradients(ad.relu, [x])

    def test_matmul(self):
        check_gradients(ad.matmul, [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))])

    def test_const_matmul_sparse(self):
        m = sp.random(5, 4, density=0.5, random_state=1, format="csr")
        check_gradients(lambda x: ad.const_matmul(m, x), [RNG.normal(size=(4, 3))])

    def test_einsum(self):
        check_gradients(lambda a, b, c: ad.einsum("ij,jkl,lm->ikm", a, b, c),
                        [RNG.normal(size=(2, 3)), RNG.normal(size=(3, 2, 4)), RNG.normal(size=(4, 2))])
        # an index summed inside a single operand
        check_gradients(lambda a, b: ad.einsum("ij,jk->k", a, b), [RNG.normal(size=(2, 3)), RNG.normal(size=(3, 2))])

    def test_shaping(self):
        check_gradients(lambda x: ad.reshape(x, (6, 2)), [RNG.normal(size=(3, 4))])
        check_gradients(lambda x: ad.transpose(x, (2, 0, 1)), [RNG.normal(size=(2, 3, 4))])
        check_gradients(lambda a, b: ad.concat([a, b], axis=1), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 1))])
        check_gradients(lambda a, b: ad.stack([a, b], axis=0), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))])
        check_gradients(lambda x: ad.take_rows(x, [0, 2, 2, 1]), [RNG.normal(size=(3, 2))])

    def test_reductions(self):
        check_gradients(lambda x: ad.sum_(x, axis=1), [RNG.normal(size=(3, 4))])
        check_gradients(lambda x: ad.mean(x, axis=0, keepdims=True), [RNG.normal(size=(3, 4))])
        check_gradients(lambda x: ad.max_(x, axis=1), [RNG.normal(size=(3, 4))])

    def test_mean_pool_through_sparse_matrix(self):
        pool = sp.csr_matrix(np.array([[0.5, 0.5, 0, 0, 0], [0, 0, 1 / 3, 1 / 3, 1 / 3]]))
        check_gradients(lambda x: ad.const_matmul(pool, x), [RNG.normal(size=(5, 3))])

    def test_conv2d(self):
        check_gradients(lambda x, w, b: ad.conv2d(x, w, b, padding=1),
                        [RNG.normal(size=(2, 3, 5, 4)), RNG.normal(size=(2, 3, 3, 3)), RNG.normal(size=(2,))])

    def test_maxpool_drops_tail(self):
        x = RNG.normal(size=(1, 2, 5, 5))
        out = ad.maxpool2d(x, 2)
        assert out.shape == (1, 2, 2, 2)
        check_gradients(lambda v: ad.maxpool2d(v, 2), [x])

    def test_batchnorm_train_mode(self):
        running = {"mean": np.zeros(3), "var": np.ones(3)}

        def fn(x, g, b):
            return ad.batchnorm(x, g, b, dict(running), training=True)

        check_gradients(fn, [RNG.normal(size=(6, 3)), RNG.normal(size=(3,)), RNG.normal(size=(3,))], rtol=1e-4)

    def test_batchnorm_fixed_stats(self):
        stats = (np.array([0.1, -0.2]), np.array([2.0, 0.5]))
        running = {"mean": np.zeros(2), "var": np.ones(2)}
        check_gradients(lambda x, g: ad.batchnorm(x, g, 0.0, running, True, stats=stats),
                        [RNG.normal(size=(4, 2)), RNG.normal(size=(2,))])
        np.testing.assert_array_equal(running["mean"], np.zeros(2))

    def test_cross_entropy(self):
        labels = np.array([0, 2, 1, 2])
        check_gradients(lambda z: ad.cross_entropy(z, labels), [RNG.normal(size=(4, 3))])
        check_gradients(lambda z: ad.cross_entropy(z, labels, reduction="sum"), [RNG.normal(size=(4, 3))])


class TestBatchNormRunning:
    def test_running_update(self):
        running = {"mean": np.zeros(2), "var": np.ones(2)}
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        ad.batchnorm(x, np.ones(2), np.zeros(2), running, training=True, momentum=0.9)
        np.testing.assert_allclose(running["mean"], 0.1 * np.array([2.0, 4.0]))
        np.testing.assert_allclose(running["var"], 0.9 + 0.1 * np.array([2.0, 8.0]))

    def test_eval_uses_running(self):
        running = {"mean": np.array([1.0]), "var": np.array([4.0])}
        out = ad.batchnorm(np.array([[3.0]]), np.ones(1), np.zeros(1), running, training=False, eps=0.0)
        assert out[0, 0] == pytest.approx(1.0)


class TestCrossEntropyValues:
    def test_uniform_is_log_classes(self):
        assert float(ad.cross_entropy(np.zeros((3, 2)), [0, 1, 1])) == pytest.approx(np.log(2))

    def test_large_logits_are_stable(self):
        assert float(ad.cross_entropy(np.array([[1000.0, 0.0]]), [0])) == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(float(ad.cross_entropy(np.array([[1000.0, 0.0]]), [1])))

    def test_bad_labels(self):
        with pytest.raises(ContractError):
            ad.cross_entropy(np.zeros((2, 2)), [0, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_softmax_rows_sum_to_one(self, seed):
        z = np.random.default_rng(seed).normal(scale=20, size=(4, 5))
        np.testing.assert_allclose(ad.softmax(z).sum(axis=1), 1.0, rtol=1e-12)


class TestStoreAndBackward:
    def test_sum_of_squares(self):
        store = ParamStore()
        store.add("p", np.array([1.0, -2.0, 3.0]))
        store.add("unused", np.ones(2))
        store.track()
        with Tape() as tape:
            p = store.get("p")
            loss = ad.sum_(ad.mul(p, p))
        tape.backward(loss, store)
        np.testing.assert_array_equal(store.params["p"].grad, [2.0, -4.0, 6.0])
        np.testing.assert_array_equal(store.params["unused"].grad, [0.0, 0.0])

    def test_gradients_accumulate_across_backward_calls(self):
        store = ParamStore()
        store.add("p", np.array([2.0]))
        for _ in range(2):
            store.track()
            with Tape() as tape:
                loss = ad.sum_(ad.mul(store.get("p"), 3.0))
            tape.backward(loss, store)
        np.testing.assert_array_equal(store.params["p"].grad, [6.0])

    def test_shared_parameter_sums_paths(self):
        store = ParamStore()
        store.add("p", np.array([[2.0]]))
        store.track()
        with Tape() as tape:
            p = store.get("p")
            loss = ad.sum_(ad.add(ad.matmul(p, p), p))
        tape.backward(loss, store)
        np.testing.assert_allclose(store.params["p"].grad, [[5.0]])

    def test_non_scalar_loss(self):
        with Tape() as tape:
            out = ad.mul(Var(np.ones(3)), 2.0)
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(out)

    def test_untracked_ops_return_arrays(self):
        assert isinstance(ad.matmul(np.eye(2), np.ones((2, 1))), np.ndarray)

    def test_duplicate_and_shape_checked_load(self):
        store = ParamStore()
        store.add("a", np.zeros(2))
        with pytest.raises(ContractError):
            store.add("a", np.zeros(2))
        with pytest.raises(ContractError):
            store.load_values({"a": np.zeros(3)})


class TestAdam:
    def make(self, value, grad):
        store = ParamStore()
        store.add("w", np.array(value, dtype=float))
        store.params["w"].grad = np.array(grad, dtype=float)
        return store

    def test_zero_gradient_keeps_values(self):
        store = self.make([1.0, -2.0], [0.0, 0.0])
        adam_step(store, 0.1)
        np.testing.assert_array_equal(store.params["w"].value, [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        store = self.make([1.0, -2.0], [3.0, -0.5])
        adam_step(store, 0.01)
        np.testing.assert_allclose(store.params["w"].value, [0.99, -1.99], rtol=1e-6)
        np.testing.assert_array_equal(store.params["w"].grad, [0.0, 0.0])

    def test_second_step_matches_hand_computation(self):
        store = self.make([0.0], [1.0])
        adam_step(store, 0.1)
        store.params["w"].grad = np.array([3.0])
        adam_step(store, 0.1)
        m = 0.9 * 0.1 + 0.1 * 3.0
        v = 0.999 * 0.001 + 0.001 * 9.0
        first = -0.1 / (1 + 1e-8)
        expected = first - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        np.testing.assert_allclose(store.params["w"].value, [expected], rtol=1e-12)

    def test_nan_gradient_names_parameter(self):
        store = self.make([1.0], [np.nan])
        with pytest.raises(TrainingError, match="'w'"):
            adam_step(store, 0.01)

    def test_minimises_quadratic(self):
        store = ParamStore()
        store.add("w", np.array([5.0, -3.0]))
        for _ in range(500):
            store.track()
            with Tape() as tape:
                w = store.get("w")
                loss = ad.sum_(ad.mul(w, w))
            tape.backward(loss, store)
            adam_step(store, 0.05)
        assert np.abs(store.params["w"].value).max() < 1e-2
