"""Differentiable backward warping and mask fusion.

``backward_warp`` resamples a channel-first source at ``p + flow(p)`` with bilinear (2D) or trilinear (3D) weights.
Sample positions outside the lattice are clamped to the edge per axis before interpolation; clamped coordinates
take no gradient. The interpolation cell is anchored at ``floor(q)``, which fixes the subgradient at integer
positions.
"""

import itertools

import numpy as np

from flint_tsr.tensor import Function, Node, add, constant, mul, sub

# allow short operation classes without docstrings
# ruff: noqa: D102

BOUNDARY_MODES = ("clamp",)


class BackwardWarp(Function):
    """Sample ``source`` (``(C, *dims)``) at ``p + flow(p)`` with ``flow`` shaped ``(rank, *dims)``."""

    def forward(self, source, flow, boundary="clamp"):
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {boundary!r}")
        dims = source.shape[1:]
        rank = len(dims)
        if flow.shape != (rank,) + dims:
            raise ValueError(f"warp: flow shape {flow.shape} does not match {rank} components over dims {dims}")
        base = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        self.lo, self.hi, self.frac, self.inside = [], [], [], []
        for axis, n in enumerate(dims):
            # array axis ``axis`` is moved by flow component ``rank - 1 - axis``
            q = base[axis] + flow[rank - 1 - axis]
            self.inside.append((q >= 0.0) & (q <= n - 1))
            q = np.clip(q, 0.0, n - 1)
            lo = np.minimum(np.floor(q).astype(int), n - 1)
            self.lo.append(lo)
            self.hi.append(np.minimum(lo + 1, n - 1))
            self.frac.append(q - lo)
        self.source = source
        out = np.zeros_like(source)
        for corner in itertools.product((0, 1), repeat=rank):
            out += self._weight(corner) * source[self._index(corner)]
        return out

    def _index(self, corner) -> tuple:
        return (slice(None),) + tuple(hi if bit else lo for bit, lo, hi in zip(corner, self.lo, self.hi))

    def _weight(self, corner, skip: int | None = None) -> np.ndarray:
        w = np.ones_like(self.frac[0])
        for axis, (bit, f) in enumerate(zip(corner, self.frac)):
            if axis != skip:
                w = w * (f if bit else 1.0 - f)
        return w

    def backward(self, grad):
        rank = len(self.lo)
        gsrc = np.zeros_like(self.source)
        gflow = np.zeros((rank,) + self.source.shape[1:])
        for corner in itertools.product((0, 1), repeat=rank):
            index = self._index(corner)
            np.add.at(gsrc, index, self._weight(corner) * grad)
            values = np.sum(self.source[index] * grad, axis=0)
            for axis in range(rank):
                sign = 1.0 if corner[axis] else -1.0
                gflow[rank - 1 - axis] += sign * self._weight(corner, skip=axis) * values
        for axis in range(rank):
            gflow[rank - 1 - axis] *= self.inside[axis]
        return gsrc, gflow


def backward_warp(source: Node, flow: Node, boundary: str = "clamp") -> Node:
    """Warp ``source`` backwards along ``flow`` (cells); gradients reach both the values and the flow."""
    return BackwardWarp.apply(source, flow, boundary=boundary)


def fuse(warped_s: Node, warped_u: Node, mask: Node) -> Node:
    """Blend two warped fields per cell: ``warped_s * mask + warped_u * (1 - mask)``.

    Raises:
        ValueError: If the fields and mask disagree on dims or the mask leaves [0, 1].
    """
    if warped_s.shape != warped_u.shape:
        raise ValueError(f"fuse: field shapes {warped_s.shape} and {warped_u.shape} differ")
    if mask.shape[1:] != warped_s.shape[1:]:
        raise ValueError(f"fuse: mask dims {mask.shape[1:]} do not match field dims {warped_s.shape[1:]}")
    if mask.data.min() < 0.0 or mask.data.max() > 1.0:
        raise ValueError("fuse: mask values must lie in [0, 1]")
    return add(mul(warped_s, mask), mul(warped_u, sub(constant(1.0), mask)))
