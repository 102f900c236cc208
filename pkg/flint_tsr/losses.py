"""Loss terms and the composite training objectives.

Spatial sums are normalized per cell so the weights transfer across grid sizes.
"""

from typing import NamedTuple, Sequence

import numpy as np

from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import Node, abs_, add, constant, mean, mul, sqrt, square, sub, sum_
from flint_tsr.types import Float
from flint_tsr.warp import backward_warp


class LossWeights(ConfigStruct):
    """Loss weights: ``lambda_flow`` balances the supervised objective, the rest the unsupervised one."""

    lambda_flow = Float(low=0.0, default=0.2)
    gamma = Float(low=0.0, high=1.0, default=0.8)
    lambda_dis = Float(low=0.0, default=1e-4)
    lambda_photo = Float(low=0.0, default=1e-6)
    lambda_reg = Float(low=0.0, default=1e-8)
    epsilon = Float(low=0.0, default=1e-9)

    def check(self) -> None:
        """Gamma must be strictly positive."""
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


class LossParts(NamedTuple):
    """Individual loss terms; absent terms are None."""

    rec: Node
    flow: Node | None = None
    dis: Node | None = None
    photo: Node | None = None
    reg: Node | None = None


def _same_shape(a: Node, b: Node, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _cells(x: Node) -> int:
    return int(np.prod(x.shape[1:]))


def l_rec(pred: Node, gt: Node, teacher_pred: Node | None = None) -> Node:
    """Mean absolute reconstruction error, plus the teacher's own when given."""
    _same_shape(pred, gt, "l_rec")
    loss = mean(abs_(sub(gt, pred)))
    if teacher_pred is not None:
        _same_shape(teacher_pred, gt, "l_rec")
        loss = add(loss, mean(abs_(sub(gt, teacher_pred))))
    return loss


def flow_l1(flow: Node, gt: Node) -> Node:
    """Per-cell L1 of the vector difference, summed over components and averaged over cells."""
    _same_shape(flow, gt, "l_flow")
    return mul(sum_(abs_(sub(gt, flow))), 1.0 / _cells(flow))


def l_flow(block_flows: Sequence[Node], gt: Node, gamma: float, teacher_flow: Node | None = None) -> Node:
    """Flow error of every block, the last one weighted 1 and earlier ones by powers of ``gamma``."""
    if not block_flows:
        raise ValueError("l_flow needs at least one block flow")
    n = len(block_flows)
    loss = None
    for i, flow in enumerate(block_flows):
        term = mul(flow_l1(flow, gt), gamma ** (n - 1 - i))
        loss = term if loss is None else add(loss, term)
    if teacher_flow is not None:
        loss = add(loss, flow_l1(teacher_flow, gt))
    return loss


def _rms_difference(student: Node, teacher: Node) -> Node:
    _same_shape(student, teacher, "l_dis")
    per_cell = sum_(square(sub(student, constant(teacher.data))), axis=0)
    return sqrt(mean(per_cell))


def l_dis(student_s: Node, student_u: Node, teacher_s: Node, teacher_u: Node) -> Node:
    """Root-mean-square distance of the student's last flows to the teacher's, per direction.

    The teacher flows are copied out of the graph, so this term never pushes gradients into the teacher.
    """
    return add(_rms_difference(student_s, teacher_s), _rms_difference(student_u, teacher_u))


def charbonnier(x: Node, epsilon: float) -> Node:
    """``sqrt(x**2 + epsilon**2)`` elementwise."""
    return sqrt(add(square(x), epsilon * epsilon))


def l_photo(flow_s: Node, flow_u: Node, d_s: Node, d_u: Node, pred: Node, epsilon: float = 1e-9) -> Node:
    """Charbonnier photometric error between each input frame and the interpolant warped back onto it.

    The interpolant is sampled at ``p - flow_j(p)`` for ``j`` in the earlier and later frame, and the two per-cell
    means are averaged.
    """
    terms = []
    for flow, frame in ((flow_s, d_s), (flow_u, d_u)):
        _same_shape(frame, pred, "l_photo")
        warped = backward_warp(pred, mul(flow, -1.0))
        terms.append(mean(charbonnier(sub(frame, warped), epsilon)))
    return mul(add(terms[0], terms[1]), 0.5)


def l_reg(student_weights: Sequence[Node], teacher_weights: Sequence[Node] = ()) -> Node:
    """Sum of L1 norms of the given kernels."""
    weights = list(student_weights) + list(teacher_weights)
    if not weights:
        raise ValueError("l_reg needs at least one weight tensor")
    loss = sum_(abs_(weights[0]))
    for w in weights[1:]:
        loss = add(loss, sum_(abs_(w)))
    return loss


def _weighted(loss: Node, part: Node | None, weight: float) -> Node:
    return loss if part is None else add(loss, mul(part, weight))


def total_supervised(parts: LossParts, weights: LossWeights) -> Node:
    """``rec + lambda_flow * flow``."""
    return _weighted(parts.rec, parts.flow, weights.lambda_flow)


def total_unsupervised(parts: LossParts, weights: LossWeights) -> Node:
    """``rec + lambda_dis * dis + lambda_photo * photo + lambda_reg * reg``."""
    loss = _weighted(parts.rec, parts.dis, weights.lambda_dis)
    loss = _weighted(loss, parts.photo, weights.lambda_photo)
    return _weighted(loss, parts.reg, weights.lambda_reg)
