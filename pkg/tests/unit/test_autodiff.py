"""
Unit tests for the reverse-mode autodiff engine
Every primitive's backward rule is checked against central finite differences
"""

import numpy as np
import pytest

from autodiff import (
    NumericFaultError,
    ParamSet,
    ShapeMismatchError,
    Tensor,
    broadcast_to,
    concat,
    discretized_gaussian_log_mass,
    exp,
    gaussian_log_density,
    log,
    matmul,
    numerical_grad,
    primitives,
    silu,
    softplus,
    sqrt,
    square,
    value_and_grad,
)


def check_gradient(f, x, atol=1e-6):
    """Compare value_and_grad of scalar f(Tensor) with finite differences"""
    _, (grad,) = value_and_grad(f, [x])
    numeric = numerical_grad(lambda v: f(Tensor(v)).item(), x)
    np.testing.assert_allclose(grad.data, numeric, atol=atol, rtol=1e-5)


class TestPrimitiveGradients:
    """Analytic backward rules against finite differences"""

    def test_elementwise_primitives(self, rng):
        """exp, log, sqrt, square, silu and softplus"""
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        for fn in (exp, log, sqrt, square, silu):
            check_gradient(lambda t: fn(t).sum(), x)
        check_gradient(lambda t: softplus(t, beta=0.3).sum(), x - 1.0)

    def test_arithmetic_with_broadcasting(self, rng):
        """Gradients of broadcast operands are summed back to their own shape"""
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 1.5, size=4)
        _, (ga, gb) = value_and_grad(lambda s, t: ((s * t) / t + s * t - s).sum(), [a, b])
        assert ga.shape == (3, 4)
        assert gb.shape == (4,)
        np.testing.assert_allclose(gb.data, a.sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(ga.data, 1.0 + np.broadcast_to(b, (3, 4)) - 1.0, atol=1e-12)

    def test_matmul(self, rng):
        a = rng.standard_normal((5, 3))
        w = rng.standard_normal((3, 2))
        check_gradient(lambda t: square(matmul(t, w)).sum(), a)
        check_gradient(lambda t: square(matmul(a, t)).sum(), w)

    def test_slicing_and_concat(self, rng):
        x = rng.standard_normal((4, 6))
        check_gradient(lambda t: square(concat([t[:, :2], t[:, 4:] * 3.0], axis=1)).sum(), x)

    def test_mean_and_reshape(self, rng):
        x = rng.standard_normal((2, 6))
        check_gradient(lambda t: square(t.reshape(3, 4)).mean(axis=0).sum(), x)

    def test_broadcast(self, rng):
        """Gradient of a broadcast value sums over the repeated axes"""
        a = rng.standard_normal((1, 3))
        weights = rng.standard_normal((4, 3))
        check_gradient(lambda t: (broadcast_to(t, (4, 3)) * weights).sum(), a)
        _, (g,) = value_and_grad(lambda t: broadcast_to(t, (4, 3)).sum(), [a])
        np.testing.assert_array_equal(g.data, np.full((1, 3), 4.0))
        with pytest.raises(ShapeMismatchError):
            broadcast_to(np.ones((2, 3)), (4, 3))

    def test_gaussian_log_density(self, rng):
        """Gradient in the mean and the scale"""
        x = rng.standard_normal((4, 3))
        mean = rng.standard_normal((4, 3))
        scale = rng.uniform(0.5, 2.0, size=(1, 3))
        check_gradient(lambda t: gaussian_log_density(x, t, scale).sum(), mean)
        check_gradient(lambda t: gaussian_log_density(x, mean, t).sum(), scale)

    def test_gaussian_log_density_value(self):
        """Normalization included: log N(0; 0, 1) = -0.5 log(2 pi)"""
        value = gaussian_log_density(0.0, 0.0, 1.0).item()
        assert abs(value + 0.5 * np.log(2 * np.pi)) < 1e-12

    def test_discretized_mass_gradient(self):
        """Interior and edge bins, gradient in mean and scale"""
        x = np.array([[0.0, 10 / 255, 128 / 255, 1.0]])
        mean = np.array([[0.05, 0.1, 0.45, 0.9]])
        scale = np.array([[0.2, 0.1, 0.3, 0.15]])

        def in_mean(t):
            out, _ = discretized_gaussian_log_mass(x, t, scale, half_width=1 / 510)
            return out.sum()

        def in_scale(t):
            out, _ = discretized_gaussian_log_mass(x, mean, t, half_width=1 / 510)
            return out.sum()

        check_gradient(in_mean, mean, atol=1e-5)
        check_gradient(in_scale, scale, atol=1e-5)


class TestDiscretizedMass:
    """Bin masses of the 256-level discretized Gaussian"""

    def test_masses_sum_to_one(self):
        grid = np.arange(256) / 255.0
        for mu, sigma in [(0.3, 0.2), (0.0, 0.05), (0.95, 0.5)]:
            out, _ = discretized_gaussian_log_mass(grid, mu, sigma, half_width=1 / 510)
            assert abs(np.exp(out.data).sum() - 1.0) < 1e-8

    def test_random_parameters_sum_to_one(self, rng):
        """1000 random (mean, scale) pairs, one vectorized call"""
        grid = np.arange(256)[None, :] / 255.0
        mean = rng.uniform(-0.2, 1.2, size=(1000, 1))
        scale = np.exp(rng.uniform(np.log(1e-3), 0.0, size=(1000, 1)))
        out, _ = discretized_gaussian_log_mass(grid, mean, scale, half_width=1 / 510)
        totals = np.exp(out.data).sum(axis=1)
        assert np.max(np.abs(totals - 1.0)) < 1e-9

    def test_far_bins_are_floored(self):
        """Masses below the floor clamp to log(floor) and report the count"""
        x = np.array([1.0, 0.0])
        out, floored = discretized_gaussian_log_mass(x, 0.0, 1e-3, half_width=1 / 510, floor=1e-12)
        assert floored == 1
        assert abs(out.data[0] - np.log(1e-12)) < 1e-12
        assert out.data[1] > np.log(0.49)

    def test_floored_bins_get_no_gradient(self):
        x = np.array([1.0])
        _, (g,) = value_and_grad(
            lambda t: discretized_gaussian_log_mass(x, t, 1e-3, half_width=1 / 510)[0].sum(),
            [np.array([0.0])])
        assert g.data[0] == 0.0


class TestErrors:
    """Shape and numeric faults"""

    def test_nan_names_the_primitive(self):
        with pytest.raises(NumericFaultError) as info:
            log(Tensor([-1.0]))
        assert info.value.op == "log"

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
        with pytest.raises(ShapeMismatchError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ShapeMismatchError):
            value_and_grad(lambda t: t * 2.0, [np.ones(3)])

    def test_registry_lists_core_primitives(self):
        names = primitives()
        for name in ("add", "mul", "matmul", "exp", "log", "silu", "softplus",
                     "gaussian_log_density", "discretized_gaussian_log_mass", "slice", "concat", "broadcast"):
            assert name in names


class TestParamSet:
    """Named parameter collections"""

    def test_duplicate_names_rejected(self):
        params = ParamSet()
        params.add("decoder.0.weight", np.zeros((2, 2)))
        with pytest.raises(KeyError):
            params.add("decoder.0.weight", np.ones((2, 2)))

    def test_combine_and_norm(self):
        a = ParamSet.from_arrays({"w": np.array([3.0, 0.0]), "b": np.array([0.0])})
        b = ParamSet.from_arrays({"w": np.array([1.0, 4.0]), "b": np.array([2.0])})
        out = a.combine(b, 0.5, 0.5)
        np.testing.assert_array_equal(out["w"].data, [2.0, 2.0])
        np.testing.assert_array_equal(out["b"].data, [1.0])
        assert a.global_norm() == 3.0
        assert a.num_parameters() == 3

    def test_combine_requires_matching_layout(self):
        a = ParamSet.from_arrays({"w": np.zeros(2)})
        b = ParamSet.from_arrays({"v": np.zeros(2)})
        with pytest.raises(ShapeMismatchError):
            a.combine(b)

    def test_value_and_grad_leaves_inputs_untouched(self):
        params = ParamSet.from_arrays({"w": np.array([1.0, 2.0])})
        value, grads = value_and_grad(lambda p: square(p["w"]).sum(), params)
        assert value == 5.0
        np.testing.assert_array_equal(grads["w"].data, [2.0, 4.0])
        assert params["w"].grad is None
        assert not params["w"].requires_grad

    def test_unused_parameter_gets_zero_gradient(self):
        params = ParamSet.from_arrays({"used": np.ones(2), "unused": np.ones(3)})
        _, grads = value_and_grad(lambda p: p["used"].sum(), params)
        np.testing.assert_array_equal(grads["unused"].data, np.zeros(3))


class TestAccumulation:
    """Leaf gradient buffers across repeated backward passes"""

    def test_second_backward_doubles_leaf_gradients(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        y = (square(x) * 3.0 + x).sum()
        y.backward()
        once = x.grad.copy()
        np.testing.assert_allclose(once, 6.0 * x.data + 1.0, atol=1e-12)
        y.backward()
        np.testing.assert_allclose(x.grad, 2.0 * once, atol=1e-12)
        x.zero_grad()
        y.backward()
        np.testing.assert_array_equal(x.grad, once)

    def test_gradients_are_linear(self, rng):
        """grad(a f + b g) = a grad f + b grad g"""
        def f(t):
            return softplus(matmul(t, w), beta=0.3).sum()

        def g(t):
            return (silu(t) * t).mean()

        for _ in range(20):
            w = rng.standard_normal((4, 2))
            x = rng.standard_normal((3, 4))
            a, b = rng.standard_normal(2)
            _, (combined,) = value_and_grad(lambda t: f(t) * a + g(t) * b, [x])
            _, (gf,) = value_and_grad(f, [x])
            _, (gg,) = value_and_grad(g, [x])
            np.testing.assert_allclose(combined.data, a * gf.data + b * gg.data, atol=1e-12)
