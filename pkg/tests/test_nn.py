import numpy as np
import pytest

from fedplanes.nn import (
    LayerSpec,
    OptimizerState,
    ParamVector,
    cross_entropy,
    grad_check,
    kl_diag_gaussians,
    kl_diag_gaussians_backward,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_param_shapes,
    sgd_momentum_step,
)
from fedplanes.rng import RngStream


def make_net(prefix, specs, seed=0):
    params = ParamVector.build(mlp_param_shapes(prefix, specs))
    mlp_init(params, prefix, specs, RngStream(seed, prefix))
    return params


class TestParamVector:
    def test_tiling_validation(self):
        from fedplanes.nn import Segment

        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), [Segment("a", 1, (2,))])
        with pytest.raises(ValueError):
            ParamVector(np.zeros(5), [Segment("a", 0, (2, 2))])

    def test_flatten_roundtrip_bit_exact(self):
        specs = [LayerSpec(3, 4), LayerSpec(4, 2, "linear")]
        p = make_net("m", specs, seed=3)
        w = p.view("m/L0/W").copy()
        q = ParamVector(p.data.copy(), p.segments)
        np.testing.assert_array_equal(q.view("m/L0/W"), w)
        assert p.shape_compatible(q)

    def test_views_alias_data(self):
        specs = [LayerSpec(2, 2, "linear")]
        p = make_net("m", specs)
        p.view("m/L0/b")[...] = 7.0
        assert p.data[p.view("m/L0/W").size :][0] == 7.0


class TestForward:
    def test_zero_params_linear_gives_zeros(self):
        specs = [LayerSpec(3, 2, "linear")]
        p = ParamVector.build(mlp_param_shapes("m", specs))
        out, _ = mlp_forward(p, "m", specs, np.ones((4, 3)))
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_identity_layer(self):
        specs = [LayerSpec(3, 3, "linear")]
        p = ParamVector.build(mlp_param_shapes("m", specs))
        p.view("m/L0/W")[...] = np.eye(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        out, _ = mlp_forward(p, "m", specs, x)
        np.testing.assert_array_equal(out, x)

    def test_softmax_rows_are_simplices(self):
        specs = [LayerSpec(4, 8), LayerSpec(8, 3, "softmax")]
        p = make_net("m", specs, seed=1)
        x = np.random.default_rng(1).normal(size=(6, 4))
        out, _ = mlp_forward(p, "m", specs, x)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0.0)

    def test_dimension_mismatch(self):
        specs = [LayerSpec(3, 2, "linear")]
        p = make_net("m", specs)
        with pytest.raises(ValueError):
            mlp_forward(p, "m", specs, np.zeros((2, 4)))

    def test_forward_deterministic(self):
        specs = [LayerSpec(3, 5), LayerSpec(5, 2, "softmax")]
        p = make_net("m", specs, seed=2)
        x = np.random.default_rng(2).normal(size=(7, 3))
        a, _ = mlp_forward(p, "m", specs, x)
        b, _ = mlp_forward(p, "m", specs, x)
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_zero_upstream_zero_grad(self):
        specs = [LayerSpec(3, 4), LayerSpec(4, 2, "linear")]
        p = make_net("m", specs, seed=4)
        x = np.random.default_rng(4).normal(size=(5, 3))
        _, cache = mlp_forward(p, "m", specs, x)
        grad = p.zeros_like()
        gin = mlp_backward(p, "m", specs, cache, np.zeros((5, 2)), grad)
        np.testing.assert_array_equal(grad.data, 0.0)
        np.testing.assert_array_equal(gin, 0.0)

    def test_linear_regression_closed_form(self):
        # single linear layer, squared loss: dL/dW = 2/n * X^T (Xw - y)
        specs = [LayerSpec(3, 1, "linear")]
        p = make_net("m", specs, seed=5)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(10, 3))
        y = rng.normal(size=(10, 1))
        out, cache = mlp_forward(p, "m", specs, x)
        n = x.shape[0]
        grad = p.zeros_like()
        mlp_backward(p, "m", specs, cache, 2.0 * (out - y) / n, grad)
        w = p.view("m/L0/W")
        analytic = 2.0 / n * x.T @ (x @ w + p.view("m/L0/b") - y)
        np.testing.assert_allclose(grad.view("m/L0/W"), analytic, atol=1e-10)

    def test_three_layer_finite_difference(self):
        specs = [LayerSpec(4, 6), LayerSpec(6, 5, "sigmoid"), LayerSpec(5, 3, "softmax")]
        p = make_net("m", specs, seed=6)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 4))
        y = np.eye(3)[rng.integers(0, 3, size=8)]

        def loss_fn(params):
            out, cache = mlp_forward(params, "m", specs, x)
            loss, glogits = cross_entropy(out, y)
            grad = params.zeros_like()
            mlp_backward(params, "m", specs, cache, glogits, grad)
            return loss, grad

        assert grad_check(loss_fn, p, eps=1e-5) < 1e-4

    def test_stale_cache_rejected(self):
        specs = [LayerSpec(2, 2, "linear")]
        p = make_net("m", specs)
        with pytest.raises(RuntimeError):
            mlp_backward(p, "m", specs, None, np.zeros((1, 2)), p.zeros_like())


class TestCrossEntropy:
    def test_perfect_prediction(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = cross_entropy(y, y)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_uniform_probs(self):
        u = 4
        probs = np.full((3, u), 1.0 / u)
        y = np.eye(u)[[0, 1, 2]]
        loss, _ = cross_entropy(probs, y)
        assert loss == pytest.approx(np.log(u))

    def test_mixed_batch_is_mean(self):
        probs = np.array([[1.0, 0.0], [0.5, 0.5]])
        y = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss, _ = cross_entropy(probs, y)
        assert loss == pytest.approx((0.0 + np.log(2)) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 2)), np.zeros((2, 3)))


class TestKl:
    def test_identical_is_zero(self):
        mu = np.random.default_rng(7).normal(size=(4, 3))
        lv = np.random.default_rng(8).normal(size=(4, 3))
        assert kl_diag_gaussians(mu, lv, mu, lv) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift_half(self):
        z = np.zeros((1, 1))
        o = np.ones((1, 1))
        assert kl_diag_gaussians(z, z, o, z) == pytest.approx(0.5)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            args = [rng.normal(size=(3, 5)) for _ in range(4)]
            assert kl_diag_gaussians(*args) >= -1e-12

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        args = [rng.normal(size=(2, 3)) * 0.5 for _ in range(4)]
        grads = kl_diag_gaussians_backward(*args, coef=1.0)
        eps = 1e-6
        for ai in range(4):
            for idx in np.ndindex(*args[ai].shape):
                plus = [a.copy() for a in args]
                minus = [a.copy() for a in args]
                plus[ai][idx] += eps
                minus[ai][idx] -= eps
                fd = (kl_diag_gaussians(*plus) - kl_diag_gaussians(*minus)) / (2 * eps)
                assert grads[ai][idx] == pytest.approx(fd, abs=1e-6)


class TestOptimizer:
    def _params(self):
        specs = [LayerSpec(2, 2, "linear")]
        return make_net("m", specs, seed=11)

    def test_zero_grad_no_change(self):
        p = self._params()
        before = p.data.copy()
        state = OptimizerState.for_params(p)
        sgd_momentum_step(p, np.zeros(p.size), state)
        np.testing.assert_array_equal(p.data, before)

    def test_momentum_zero_plain_step(self):
        p = self._params()
        before = p.data.copy()
        g = np.ones(p.size)
        state = OptimizerState.for_params(p, learning_rate=0.1, momentum=0.0)
        sgd_momentum_step(p, g, state)
        np.testing.assert_allclose(p.data, before - 0.1 * g)

    def test_two_steps_unrolled(self):
        # constant grad g, momentum 0.9: displacement lr*g*(1 + 1.9)
        p = self._params()
        before = p.data.copy()
        g = np.full(p.size, 0.5)
        state = OptimizerState.for_params(p, learning_rate=0.01, momentum=0.9)
        sgd_momentum_step(p, g, state)
        sgd_momentum_step(p, g, state)
        np.testing.assert_allclose(before - p.data, 0.01 * g * (1.0 + 1.9))

    def test_quadratic_descent(self):
        # loss 0.5*||p||^2 decreases after one small step
        p = self._params()
        p.data[...] = 1.0
        state = OptimizerState.for_params(p, learning_rate=0.05, momentum=0.9)
        before = 0.5 * np.sum(p.data**2)
        sgd_momentum_step(p, p.data.copy(), state)
        assert 0.5 * np.sum(p.data**2) < before


class TestGradCheckLinearRegression:
    def test_error_below_1e8(self):
        specs = [LayerSpec(3, 1, "linear")]
        p = make_net("m", specs, seed=12)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(12, 3))
        y = rng.normal(size=(12, 1))

        def loss_fn(params):
            out, cache = mlp_forward(params, "m", specs, x)
            n = x.shape[0]
            loss = float(np.sum((out - y) ** 2) / n)
            grad = params.zeros_like()
            mlp_backward(params, "m", specs, cache, 2.0 * (out - y) / n, grad)
            return loss, grad

        assert grad_check(loss_fn, p, eps=1e-6) < 1e-8
