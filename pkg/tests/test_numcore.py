import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textpgd import autodiff as ad
from textpgd import models, numcore
from textpgd.autodiff import Var


def _random_model(arch, dim, n_layers, seed, vocab_size=12):
    return models.init_params(arch, vocab_size, dim, max_positions=16,
                              n_layers=n_layers, n_classes=2, seed=seed)


def _rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


class TestAutodiffOps:
    """Spot-check each op's backward against central differences."""

    def _check(self, build, shapes, seed=0, tol=1e-6):
        rng = np.random.Generator(np.random.Philox(key=seed))
        arrays = [rng.normal(size=s) for s in shapes]
        for which in range(len(arrays)):
            variables = [Var(a.copy()) for a in arrays]
            out = build(*variables)
            ad.backward(out)
            analytic = variables[which].grad

            def f(x):
                vs = [Var(x.copy() if i == which else a.copy())
                      for i, a in enumerate(arrays)]
                return float(build(*vs).value)

            numeric = numcore.finite_diff_gradient(f, arrays[which])
            assert _rel_err(analytic, numeric) < tol

    def test_matmul_2d(self):
        self._check(lambda a, b: _sum(ad.matmul(a, b)), [(3, 4), (4, 5)])

    def test_matmul_vector_left(self):
        self._check(lambda a, b: _sum(ad.matmul(a, b)), [(4,), (4, 5)])

    def test_matmul_t(self):
        self._check(lambda a, b: _sum(ad.matmul_t(a, b)), [(3, 4), (5, 4)])

    def test_add_broadcast(self):
        self._check(lambda a, b: _sum(a + b), [(3, 4), (4,)])

    def test_relu(self):
        self._check(lambda a: _sum(ad.relu(a)), [(3, 4)], seed=3)

    def test_softmax_rows(self):
        self._check(lambda a: _sum(ad.matmul_t(ad.softmax_rows(a), a)), [(3, 4)])

    def test_layer_norm(self):
        self._check(lambda x, g, b: _sum(ad.layer_norm(x, g, b)),
                    [(3, 6), (6,), (6,)])

    def test_gather_rows(self):
        idx = np.array([0, 2, 2, 1])
        self._check(lambda t: _sum(ad.gather_rows(t, idx)), [(4, 3)])

    def test_cross_entropy(self):
        self._check(lambda z: ad.cross_entropy(z, 1), [(4,)])

    def test_cross_entropy_rows(self):
        targets = np.array([1, 0, 2])
        self._check(lambda z: ad.cross_entropy_rows(z, targets), [(3, 4)])

    def test_cosine_to(self):
        v = np.array([1.0, -2.0, 0.5])
        self._check(lambda u: ad.cosine_to(u, v), [(3,)])

    def test_cosine_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            ad.cosine_to(Var(np.zeros(3)), np.ones(3))

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(Var(np.ones(3)))


def _sum(v):
    # reduce to a scalar through ops under test
    return ad.cross_entropy(
        ad.matmul(ad.mean_rows(v) if v.value.ndim == 2 else v,
                  Var(np.ones((v.value.shape[-1], 2)))), 0)


class TestLossAndGrad:
    @pytest.mark.parametrize("dim", [4, 8])
    @pytest.mark.parametrize("n_layers", [0, 1, 2])
    @pytest.mark.parametrize("lambda_sem", [0.0, 1.0])
    def test_matches_finite_differences(self, dim, n_layers, lambda_sem):
        params = _random_model("transformer", dim, n_layers, seed=dim + n_layers)
        rng = np.random.Generator(np.random.Philox(key=99))
        emb = rng.normal(size=(5, dim))
        ref = rng.normal(size=dim)
        objective = "cls_plus_sim" if lambda_sem else "cls"
        res = numcore.loss_and_grad(params, emb, 1, objective, ref, lambda_sem)

        def f(x):
            return numcore.loss_and_grad(params, x, 1, objective, ref,
                                         lambda_sem).loss

        numeric = numcore.finite_diff_gradient(f, emb)
        assert _rel_err(res.grad_embeddings, numeric) < 1e-6

    def test_avg_mlp_gradient(self):
        params = _random_model("avg_mlp", 6, 0, seed=2)
        rng = np.random.Generator(np.random.Philox(key=4))
        emb = rng.normal(size=(4, 6))
        res = numcore.loss_and_grad(params, emb, 0)
        numeric = numcore.finite_diff_gradient(
            lambda x: numcore.loss_and_grad(params, x, 0).loss, emb)
        assert _rel_err(res.grad_embeddings, numeric) < 1e-6

    def test_lambda_zero_equals_cls(self):
        params = _random_model("transformer", 4, 1, seed=1)
        rng = np.random.Generator(np.random.Philox(key=5))
        emb = rng.normal(size=(3, 4))
        a = numcore.loss_and_grad(params, emb, 0, "cls")
        b = numcore.loss_and_grad(params, emb, 0, "cls_plus_sim",
                                  rng.normal(size=4), 0.0)
        assert a.loss == b.loss
        assert np.array_equal(a.grad_embeddings, b.grad_embeddings)

    def test_deterministic(self):
        params = _random_model("transformer", 4, 1, seed=1)
        emb = np.ones((3, 4))
        a = numcore.loss_and_grad(params, emb, 1)
        b = numcore.loss_and_grad(params, emb, 1)
        assert a.loss == b.loss
        assert np.array_equal(a.grad_embeddings, b.grad_embeddings)

    def test_unknown_objective(self):
        params = _random_model("transformer", 4, 1, seed=1)
        with pytest.raises(ValueError, match="objective"):
            numcore.loss_and_grad(params, np.ones((2, 4)), 0, "mse")

    def test_sim_requires_reference(self):
        params = _random_model("transformer", 4, 1, seed=1)
        with pytest.raises(ValueError, match="ref"):
            numcore.loss_and_grad(params, np.ones((2, 4)), 0, "cls_plus_sim")

    def test_shape_mismatch(self):
        params = _random_model("transformer", 4, 1, seed=1)
        with pytest.raises(ValueError, match="shape"):
            numcore.loss_and_grad(params, np.ones((2, 5)), 0)

    def test_overflow_raises(self):
        params = _random_model("transformer", 4, 0, seed=1)
        with pytest.raises(FloatingPointError, match="overflow"), \
                np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            numcore.loss_and_grad(params, np.full((2, 4), np.inf), 0)


class TestEncodeForward:
    def test_shape_checks(self):
        params = _random_model("transformer", 4, 1, seed=0)
        with pytest.raises(ValueError, match="shape"):
            numcore.encode_forward(params, np.ones((2, 3)))
        with pytest.raises(ValueError, match="max positions"):
            numcore.encode_forward(params, np.ones((17, 4)))

    def test_output_shape(self):
        params = _random_model("transformer", 4, 2, seed=0)
        out = numcore.encode_forward(params, np.ones((5, 4)))
        assert out.shape == (5, 4)


class TestFiniteDiff:
    def test_quadratic_oracle(self):
        # f(x) = sum(x^2) has gradient 2x exactly (central diff is exact
        # for quadratics up to float error)
        x = np.array([1.0, -2.0, 3.0])
        g = numcore.finite_diff_gradient(lambda v: float((v * v).sum()), x)
        assert np.allclose(g, 2 * x, atol=1e-8)

    def test_h_validated(self):
        with pytest.raises(ValueError):
            numcore.finite_diff_gradient(lambda v: 0.0, np.ones(2), h=0)


class TestAdam:
    def test_matches_reference_implementation(self):
        rng = np.random.Generator(np.random.Philox(key=8))
        p0 = rng.normal(size=(3, 2))
        tensors = {"w": p0.copy()}
        state = numcore.AdamState()
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        m = np.zeros_like(p0)
        v = np.zeros_like(p0)
        ref = p0.copy()
        for t in range(1, 6):
            g = rng.normal(size=(3, 2))
            numcore.adam_step(tensors, {"w": g}, state, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert np.allclose(tensors["w"], ref, atol=1e-12)
        assert state.t == 5

    def test_shape_mismatch(self):
        state = numcore.AdamState()
        with pytest.raises(ValueError, match="mismatch"):
            numcore.adam_step({"w": np.ones(3)}, {"w": np.ones(4)}, state, 1e-3)

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_descends_on_quadratic(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        target = rng.normal(size=4)
        tensors = {"w": np.zeros(4)}
        state = numcore.AdamState()
        for _ in range(200):
            g = 2 * (tensors["w"] - target)
            numcore.adam_step(tensors, {"w": g}, state, 5e-2)
        assert np.abs(tensors["w"] - target).max() < 1e-2
