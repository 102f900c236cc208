"""Test backward warping and fusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flint_tsr.tensor import constant, grad_check, mul, parameter, sum_
from flint_tsr.warp import backward_warp, fuse

# allow magic value comparison
# ruff: noqa: PLR2004
# allow functions without docstrings
# pylint: disable=missing-function-docstring

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def off_lattice_flow(rng, shape, reach=2):
    """Flows whose fractional part stays in [0.2, 0.8], so no sample sits on a cell edge."""
    whole = rng.integers(-reach, reach + 1, size=shape)
    return whole + rng.uniform(0.2, 0.8, size=shape)


def test_identity_warp_is_exact():
    src = np.random.default_rng(0).random((2, 5, 7))
    out = backward_warp(constant(src), constant(np.zeros((2, 5, 7)))).data
    np.testing.assert_array_equal(out, src)


def test_integer_shift_matches_index_shift():
    src = np.random.default_rng(1).random((1, 6, 8))
    flow = np.zeros((2, 6, 8))
    flow[0] = 2.0
    flow[1] = -1.0
    out = backward_warp(constant(src), constant(flow)).data
    # sample at (y - 1, x + 2)
    np.testing.assert_allclose(out[0, 1:, :-2], src[0, :-1, 2:], atol=1e-12)
    # clamped to the right edge
    np.testing.assert_allclose(out[0, 1:, -1], src[0, :-1, -1], atol=1e-12)


def test_half_cell_is_bilinear():
    src = np.array([[[1.0, 2.0, 4.0], [8.0, 16.0, 32.0]]])
    flow = np.full((2, 2, 3), 0.5)
    out = backward_warp(constant(src), constant(flow)).data
    assert abs(out[0, 0, 0] - (1.0 + 2.0 + 8.0 + 16.0) / 4.0) < 1e-12
    assert abs(out[0, 0, 1] - (2.0 + 4.0 + 16.0 + 32.0) / 4.0) < 1e-12
    # x clamps to the last column, y still halfway
    assert abs(out[0, 0, 2] - (4.0 + 32.0) / 2.0) < 1e-12


def test_trilinear_z_shift():
    src = np.random.default_rng(2).random((1, 4, 3, 3))
    flow = np.zeros((3, 4, 3, 3))
    flow[2] = 1.0
    out = backward_warp(constant(src), constant(flow)).data
    np.testing.assert_allclose(out[0, :-1], src[0, 1:], atol=1e-12)
    flow[2] = 0.25
    out = backward_warp(constant(src), constant(flow)).data
    np.testing.assert_allclose(out[0, 0], 0.75 * src[0, 0] + 0.25 * src[0, 1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(min_value=0.1, max_value=20.0))
def test_warp_is_convex(seed, reach):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((2, 6, 5))
    flow = rng.uniform(-reach, reach, size=(2, 6, 5))
    out = backward_warp(constant(src), constant(flow)).data
    for c in range(2):
        assert out[c].min() >= src[c].min() - 1e-12
        assert out[c].max() <= src[c].max() + 1e-12


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_warp_gradients_2d(seed):
    rng = np.random.default_rng(seed)
    src = parameter(rng.standard_normal((2, 5, 6)))
    flow = parameter(off_lattice_flow(rng, (2, 5, 6)))
    weights = constant(rng.standard_normal((2, 5, 6)))
    assert grad_check(lambda s, f: sum_(mul(backward_warp(s, f), weights)), [src, flow]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_warp_gradients_3d(seed):
    rng = np.random.default_rng(seed)
    src = parameter(rng.standard_normal((1, 4, 4, 3)))
    flow = parameter(off_lattice_flow(rng, (3, 4, 4, 3), reach=1))
    weights = constant(rng.standard_normal((1, 4, 4, 3)))
    assert grad_check(lambda s, f: sum_(mul(backward_warp(s, f), weights)), [src, flow]) < 1e-4


def test_clamped_samples_take_no_flow_gradient():
    src = np.arange(12.0).reshape(1, 3, 4)
    flow = parameter(np.full((2, 3, 4), 10.0))
    sum_(backward_warp(constant(src), flow)).backward()
    assert not flow.grad.any()


def test_warp_contracts():
    src = constant(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError, match="does not match 2 components"):
        backward_warp(src, constant(np.zeros((3, 4, 4))))
    with pytest.raises(ValueError, match="unknown boundary mode"):
        backward_warp(src, constant(np.zeros((2, 4, 4))), boundary="wrap")


def test_fuse():
    rng = np.random.default_rng(3)
    ws, wu = constant(rng.random((1, 3, 3))), constant(rng.random((1, 3, 3)))
    np.testing.assert_allclose(fuse(ws, wu, constant(np.ones((1, 3, 3)))).data, ws.data)
    np.testing.assert_allclose(fuse(ws, wu, constant(np.zeros((1, 3, 3)))).data, wu.data)
    half = fuse(ws, wu, constant(np.full((1, 3, 3), 0.5))).data
    np.testing.assert_allclose(half, 0.5 * (ws.data + wu.data))


def test_fuse_contracts():
    a = constant(np.zeros((1, 3, 3)))
    with pytest.raises(ValueError, match="field shapes"):
        fuse(a, constant(np.zeros((1, 3, 4))), a)
    with pytest.raises(ValueError, match="mask dims"):
        fuse(a, a, constant(np.zeros((1, 2, 3))))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        fuse(a, a, constant(np.full((1, 3, 3), 1.5)))


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_fuse_gradients(seed):
    rng = np.random.default_rng(seed)
    ws, wu = parameter(rng.random((2, 3, 3))), parameter(rng.random((2, 3, 3)))
    mask = parameter(rng.uniform(0.1, 0.9, size=(1, 3, 3)))
    weights = constant(rng.standard_normal((2, 3, 3)))
    assert grad_check(lambda a, b, m: sum_(mul(fuse(a, b, m), weights)), [ws, wu, mask]) < 1e-4
