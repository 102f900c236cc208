"""Test the loss terms and composite objectives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flint_tsr import LossWeights
from flint_tsr.losses import (
    LossParts,
    charbonnier,
    flow_l1,
    l_dis,
    l_flow,
    l_photo,
    l_rec,
    l_reg,
    total_supervised,
    total_unsupervised,
)
from flint_tsr.tensor import constant, grad_check, parameter

# allow magic value comparison
# ruff: noqa: PLR2004
# allow functions without docstrings
# pylint: disable=missing-function-docstring

seeds = st.integers(min_value=0, max_value=2**32 - 1)
checks = settings(max_examples=20, deadline=None)
ONE = constant(1.0)


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_flow, w.gamma, w.lambda_dis, w.lambda_photo, w.lambda_reg) == (0.2, 0.8, 1e-4, 1e-6, 1e-8)
    with pytest.raises(ValueError, match="gamma must lie in"):
        LossWeights(gamma=0.0)
    with pytest.raises(ValueError, match="above the upper bound"):
        LossWeights(gamma=1.5)


def test_reconstruction():
    gt = constant(np.zeros((1, 2, 2)))
    pred = constant(np.full((1, 2, 2), 0.25))
    assert l_rec(pred, gt).item() == 0.25
    assert l_rec(pred, gt, constant(np.full((1, 2, 2), -0.5))).item() == 0.75
    with pytest.raises(ValueError, match="l_rec: shapes"):
        l_rec(pred, constant(np.zeros((1, 2, 3))))


def test_flow_error_constant_closed_form():
    e = 0.37
    gt = np.zeros((2, 4, 4))
    flow = gt.copy()
    flow[0] += e
    assert flow_l1(constant(flow), constant(gt)).item() == pytest.approx(e, abs=1e-15)
    blocks = [constant(flow) for _ in range(4)]
    assert abs(l_flow(blocks, constant(gt), 0.8).item() - 2.952 * e) < 1e-12


def test_flow_error_sums_component_magnitudes():
    gt = constant(np.zeros((2, 1, 2)))
    flow = constant(np.array([[[3.0, 0.0]], [[-4.0, 0.0]]]))
    assert flow_l1(flow, gt).item() == 3.5


def test_flow_error_teacher_and_contracts():
    gt = constant(np.zeros((2, 2, 2)))
    ones = constant(np.ones((2, 2, 2)))
    assert l_flow([ones], gt, 0.8, teacher_flow=ones).item() == 4.0
    with pytest.raises(ValueError, match="at least one block flow"):
        l_flow([], gt, 0.8)


def test_distillation_is_zero_when_matching():
    rng = np.random.default_rng(0)
    s, u = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    assert l_dis(constant(s), constant(u), constant(s), constant(u)).item() == 0.0


def test_distillation_value():
    s = constant(np.zeros((2, 1, 2)))
    t = constant(np.array([[[3.0, 0.0]], [[4.0, 0.0]]]))
    # per-cell squared norms 25 and 0: sqrt(12.5) per direction
    assert l_dis(s, s, t, t).item() == pytest.approx(2 * np.sqrt(12.5))


def test_distillation_leaves_teacher_alone():
    s = parameter(np.ones((2, 2, 2)))
    t = parameter(np.zeros((2, 2, 2)))
    l_dis(s, s, t, t).backward()
    assert s.grad.any()
    assert not t.grad.any()


def test_charbonnier():
    assert charbonnier(constant(0.0), 1e-3).item() == pytest.approx(1e-3)
    assert charbonnier(constant(-3.0), 1e-9).item() == pytest.approx(3.0)


def test_photometric_zero_for_static_scene():
    frame = constant(np.random.default_rng(1).random((1, 4, 4)))
    zero = constant(np.zeros((2, 4, 4)))
    assert l_photo(zero, zero, frame, frame, frame, 1e-9).item() == pytest.approx(1e-9)


def test_photometric_integer_shift():
    rng = np.random.default_rng(2)
    field = rng.random((1, 4, 8))
    shifted = np.roll(field, 1, axis=2)
    flow = np.zeros((2, 4, 8))
    flow[0] = 1.0
    # the prediction sampled one cell to the left lines up with the shifted frame away from the clamped column
    value = l_photo(constant(flow), constant(flow), constant(shifted), constant(shifted), constant(field), 1e-9)
    interior = np.abs(shifted[..., 1:] - field[..., :-1]).mean()
    assert interior < 1e-12
    assert value.item() == pytest.approx(np.abs(shifted[..., 0] - field[..., 0]).sum() / 32, abs=1e-8)


def _photo_by_summation(flow, frame, pred, epsilon):
    """Sum the Charbonnier error cell by cell, sampling ``pred`` at ``p - flow(p)`` with clamped bilinear weights."""
    rows, cols = pred.shape[1:]
    total = 0.0
    for i in range(rows):
        for j in range(cols):
            y = min(max(i - flow[1, i, j], 0.0), rows - 1)
            x = min(max(j - flow[0, i, j], 0.0), cols - 1)
            y0, x0 = min(int(np.floor(y)), rows - 1), min(int(np.floor(x)), cols - 1)
            y1, x1 = min(y0 + 1, rows - 1), min(x0 + 1, cols - 1)
            fy, fx = y - y0, x - x0
            sample = (
                (1 - fy) * (1 - fx) * pred[0, y0, x0]
                + (1 - fy) * fx * pred[0, y0, x1]
                + fy * (1 - fx) * pred[0, y1, x0]
                + fy * fx * pred[0, y1, x1]
            )
            total += np.sqrt((frame[0, i, j] - sample) ** 2 + epsilon**2)
    return total / (rows * cols)


def test_photometric_half_cell_flow_matches_summation():
    rng = np.random.default_rng(4)
    d_s, d_u, pred = (rng.random((1, 5, 7)) for _ in range(3))
    half = np.zeros((2, 5, 7))
    half[0], half[1] = 0.5, -0.5
    wild = rng.uniform(-1.5, 1.5, (2, 5, 7))
    value = l_photo(constant(half), constant(wild), constant(d_s), constant(d_u), constant(pred), 1e-3)
    expected = 0.5 * (_photo_by_summation(half, d_s, pred, 1e-3) + _photo_by_summation(wild, d_u, pred, 1e-3))
    assert value.item() == pytest.approx(expected, rel=1e-12)


def test_regularizer():
    a = constant(np.array([1.0, -2.0]))
    b = constant(np.array([[0.5, -0.5]]))
    assert l_reg([a]).item() == 3.0
    assert l_reg([a], [b]).item() == 4.0
    with pytest.raises(ValueError, match="at least one weight tensor"):
        l_reg([])


def test_supervised_composite():
    parts = LossParts(rec=ONE, flow=constant(2.0))
    assert total_supervised(parts, LossWeights()).item() == 1.0 + 0.2 * 2.0
    assert total_supervised(LossParts(rec=ONE), LossWeights()).item() == 1.0


def test_unsupervised_composite_with_unit_parts():
    parts = LossParts(rec=ONE, dis=ONE, photo=ONE, reg=ONE)
    assert total_unsupervised(parts, LossWeights()).item() == 1 + 1e-4 + 1e-6 + 1e-8


@checks
@given(seeds)
def test_flow_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    gt = constant(rng.standard_normal((2, 3, 3)))
    blocks = [parameter(gt.data + rng.uniform(0.1, 1.0, (2, 3, 3)) * rng.choice([-1, 1], (2, 3, 3))) for _ in range(3)]
    assert grad_check(lambda *b: l_flow(list(b), gt, 0.8), blocks) < 1e-4


@checks
@given(seeds)
def test_distillation_gradients(seed):
    rng = np.random.default_rng(seed)
    s, u = parameter(rng.standard_normal((2, 3, 3))), parameter(rng.standard_normal((2, 3, 3)))
    ts, tu = constant(rng.standard_normal((2, 3, 3))), constant(rng.standard_normal((2, 3, 3)))
    assert grad_check(lambda a, b: l_dis(a, b, ts, tu), [s, u]) < 1e-4


@checks
@given(seeds)
def test_photometric_gradients(seed):
    rng = np.random.default_rng(seed)
    flow_s = parameter(rng.integers(-1, 2, (2, 4, 4)) + rng.uniform(0.2, 0.8, (2, 4, 4)))
    flow_u = parameter(rng.integers(-1, 2, (2, 4, 4)) + rng.uniform(0.2, 0.8, (2, 4, 4)))
    pred = parameter(rng.random((1, 4, 4)))
    d_s, d_u = constant(rng.random((1, 4, 4))), constant(rng.random((1, 4, 4)))
    assert grad_check(lambda a, b, p: l_photo(a, b, d_s, d_u, p, 1e-3), [flow_s, flow_u, pred]) < 1e-4


@checks
@given(seeds)
def test_regularizer_gradients(seed):
    rng = np.random.default_rng(seed)
    w = parameter(rng.uniform(0.1, 1.0, (3, 2, 3, 3)) * rng.choice([-1, 1], (3, 2, 3, 3)))
    assert grad_check(lambda k: l_reg([k]), [w]) < 1e-4
