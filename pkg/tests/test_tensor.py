"""Test the differentiation engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flint_tsr.tensor import (
    Node,
    abs_,
    add,
    concat,
    constant,
    conv,
    deconv,
    dropout,
    exp,
    grad_check,
    linear,
    mean,
    mul,
    parameter,
    prelu,
    reshape,
    sigmoid,
    slice_channels,
    sqrt,
    square,
    sub,
    sum_,
)

# allow magic value comparison
# ruff: noqa: PLR2004
# allow redefining outer name for fixtures
# pylint: disable=redefined-outer-name
# allow functions without docstrings
# pylint: disable=missing-function-docstring

TOLERANCE = 1e-4
seeds = st.integers(min_value=0, max_value=2**32 - 1)
checks = settings(max_examples=20, deadline=None)


def away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def weighted_sum(out: Node, rng) -> Node:
    """Scalar root with a non-uniform upstream gradient."""
    return sum_(mul(out, constant(rng.standard_normal(out.shape))))


@checks
@given(seeds)
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = parameter(away_from_zero(rng, (3, 4)))
    b = parameter(rng.standard_normal((4,)))
    w = rng.standard_normal((3, 4))

    def fn(a, b):
        out = add(mul(sub(a, b), square(b)), abs_(a))
        out = add(out, sigmoid(mul(a, b)))
        out = add(out, exp(mul(b, 0.5)))
        return sum_(mul(out, constant(w)))

    assert grad_check(fn, [a, b]) < TOLERANCE


@checks
@given(seeds)
def test_sqrt_and_mean_gradients(seed):
    rng = np.random.default_rng(seed)
    x = parameter(0.5 + rng.random((2, 3, 3)))
    assert grad_check(lambda x: mean(sqrt(x)), [x]) < TOLERANCE


@checks
@given(seeds)
def test_shape_gradients(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.standard_normal((2, 3, 4)))
    b = parameter(rng.standard_normal((3, 3, 4)))

    def fn(a, b):
        joined = concat([a, b])
        picked = slice_channels(joined, 1, 4)
        flat = reshape(picked, (3, 12))
        return weighted_sum(sum_(flat, axis=0), np.random.default_rng(seed))

    assert grad_check(fn, [a, b]) < TOLERANCE


@checks
@given(seeds)
def test_linear_and_prelu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal((5, 4)))
    w = parameter(rng.standard_normal((3, 4)))
    b = parameter(rng.standard_normal(3) + 3.0)
    slope = parameter(np.array([0.25]))

    def fn(x, w, b, slope):
        return weighted_sum(prelu(linear(x, w, b), slope), np.random.default_rng(seed))

    assert grad_check(fn, [x, w, b, slope]) < TOLERANCE


@checks
@given(seeds)
def test_channel_prelu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = parameter(away_from_zero(rng, (3, 4, 4)))
    slope = parameter(rng.random(3))
    assert grad_check(lambda x, a: weighted_sum(prelu(x, a), np.random.default_rng(seed)), [x, slope]) < TOLERANCE


@checks
@given(seeds, st.sampled_from([(1, 0), (1, 1), (2, 1)]))
def test_conv_gradients(seed, stride_padding):
    stride, padding = stride_padding
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal((2, 6, 5)))
    k = parameter(rng.standard_normal((3, 2, 3, 3)))
    b = parameter(rng.standard_normal(3))

    def fn(x, k, b):
        return weighted_sum(conv(x, k, b, stride, padding), np.random.default_rng(seed))

    assert grad_check(fn, [x, k, b]) < TOLERANCE


@checks
@given(seeds)
def test_conv3d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal((1, 4, 4, 4)))
    k = parameter(rng.standard_normal((2, 1, 3, 3, 3)))
    b = parameter(rng.standard_normal(2))
    assert grad_check(lambda x, k, b: weighted_sum(conv(x, k, b, 2, 1), np.random.default_rng(seed)), [x, k, b]) < (
        TOLERANCE
    )


@checks
@given(seeds)
def test_deconv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal((2, 3, 3)))
    k = parameter(rng.standard_normal((2, 3, 4, 4)))
    b = parameter(rng.standard_normal(3))

    def fn(x, k, b):
        return weighted_sum(deconv(x, k, b, 2, 1), np.random.default_rng(seed))

    assert grad_check(fn, [x, k, b]) < TOLERANCE


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv(constant(x), constant(k), constant(b), stride=1, padding=1).data
    xp = np.pad(x, [(0, 0), (1, 1), (1, 1)])
    expected = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                expected[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv_output_extents():
    x = constant(np.zeros((1, 32, 32)))
    k = constant(np.zeros((4, 1, 3, 3)))
    b = constant(np.zeros(4))
    assert conv(x, k, b, stride=2, padding=1).shape == (4, 16, 16)
    up = deconv(constant(np.zeros((4, 16, 16))), constant(np.zeros((4, 2, 4, 4))), constant(np.zeros(2)), 2, 1)
    assert up.shape == (2, 32, 32)


def test_deconv_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    k = rng.standard_normal((3, 2, 4, 4))
    x = rng.standard_normal((2, 6, 6))
    y = rng.standard_normal((3, 3, 3))
    forward = conv(constant(x), constant(k), constant(np.zeros(3)), 2, 1).data
    adjoint = deconv(constant(y), constant(k), constant(np.zeros(2)), 2, 1).data
    assert forward.shape == y.shape
    assert adjoint.shape == x.shape
    np.testing.assert_allclose(np.sum(forward * y), np.sum(x * adjoint), rtol=1e-12)


def test_conv_shape_errors():
    x = constant(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError, match="expects 3 input channels on axis 0, got 2"):
        conv(x, constant(np.zeros((1, 3, 3, 3))), constant(np.zeros(1)))
    with pytest.raises(ValueError, match="kernel rank"):
        conv(x, constant(np.zeros((1, 2, 3))), constant(np.zeros(1)))
    with pytest.raises(ValueError, match="bias shape"):
        conv(x, constant(np.zeros((1, 2, 3, 3))), constant(np.zeros(2)))
    with pytest.raises(ValueError, match="exceeds padded input extent"):
        conv(x, constant(np.zeros((1, 2, 5, 5))), constant(np.zeros(1)))


def test_shared_node_accumulates():
    x = parameter([1.5, -2.0])
    sum_(add(mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_twice_doubles():
    x = parameter([1.0, 2.0, 3.0])
    y = sum_(square(x))
    y.backward()
    once = x.grad.copy()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * once)
    x.zero_grad()
    assert not x.grad.any()


def test_broadcast_gradient_shape():
    a = parameter(np.ones((2, 3)))
    b = parameter(np.ones(3))
    c = parameter(np.ones((2, 1)))
    sum_(add(add(a, b), c)).backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(c.grad, [[3.0], [3.0]])


def test_constants_take_no_gradient():
    c = constant([1.0, 2.0])
    x = parameter([3.0, 4.0])
    out = sum_(mul(c, x))
    out.backward()
    assert not c.requires_grad
    assert not c.grad.any()
    assert sum_(mul(c, c)).creator is None


def test_sqrt_zero_subgradient():
    x = parameter([0.0, 4.0])
    sum_(sqrt(x)).backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])
    with pytest.raises(ValueError, match="negative"):
        sqrt(constant([-1.0]))


def test_node_contracts():
    with pytest.raises(ValueError, match="exceeds the supported maximum"):
        Node(np.zeros((1,) * 6))
    with pytest.raises(ValueError, match="scalar root"):
        parameter([1.0, 2.0]).backward()
    with pytest.raises(ValueError, match="single value"):
        constant([1.0, 2.0]).item()
    with pytest.raises(TypeError, match="python numbers"):
        _ = parameter([1.0]) / parameter([2.0])


def test_operators():
    x = parameter([2.0])
    y = 1.0 - (x * 3.0 + 1.0) / 2.0
    assert y.item() == pytest.approx(-2.5)
    assert (-x).item() == -2.0
    y.backward()
    assert x.grad[0] == pytest.approx(-1.5)


def test_dropout():
    x = constant(np.ones((50, 50)))
    assert dropout(x, 0.5, None) is x
    assert dropout(x, 0.0, np.random.default_rng(0)) is x
    out = dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.1
    with pytest.raises(ValueError, match=r"\[0, 1\)"):
        dropout(x, 1.0, np.random.default_rng(0))


def test_grad_check_flags_wrong_gradient():
    class Broken(type(square(parameter([1.0])).creator)):
        def backward(self, grad):
            (x,) = self.inputs
            return (x.data * grad,)

    x = parameter([1.0, 2.0])
    assert grad_check(lambda x: sum_(Broken.apply(x)), [x]) > 0.1
