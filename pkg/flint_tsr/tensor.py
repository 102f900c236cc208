"""Reverse-mode differentiation over dense channel-first grids.

A :class:`Node` holds a float64 array and its accumulated gradient. Every differentiable operation is a
:class:`Function` subclass whose ``apply`` records the inputs, runs ``forward`` on raw arrays and wraps the result
in a new Node. ``Node.backward`` walks the recorded graph once in reverse topological order.

Layout is channel first everywhere: a grid is ``(channels, *spatial)`` and a convolution kernel is
``(out_channels, in_channels, *kernel)``. Convolutions are cross-correlations (no kernel flip).
"""

import itertools
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# allow magic value comparison
# ruff: noqa: PLR2004
# allow short operation classes without docstrings
# ruff: noqa: D101, D102

MAX_RANK = 5


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward``, which maps the gradient of the output to one
    gradient per input (``None`` for inputs that take no gradient).
    """

    def __init__(self, *inputs: "Node"):
        """Keep the input nodes for the backward pass."""
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        """Compute the output array."""
        raise NotImplementedError("Subclasses must implement this method.")

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        """Return the gradient with respect to each input."""
        raise NotImplementedError("Subclasses must implement this method.")

    @classmethod
    def apply(cls, *inputs: "Node", **kwargs) -> "Node":
        """Construct the function, run it forward and wrap the result."""
        func = cls(*inputs)
        out = func.forward(*(node.data for node in inputs), **kwargs)
        requires_grad = any(node.requires_grad for node in inputs)
        return Node(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Node:
    """A differentiable value: data grid plus accumulated gradient grid."""

    def __init__(self, data, requires_grad: bool = False, creator: Function | None = None, name: str | None = None):
        """Wrap ``data`` as a float64 array."""
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > MAX_RANK:
            raise ValueError(f"rank {self.data.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> tuple:
        """Shape of the data."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Rank of the data."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of entries."""
        return self.data.size

    def item(self) -> float:
        """Return the single value of a scalar node."""
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Reset the accumulated gradient to zeros."""
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every node of the graph.

        Upstream gradients are collected in a pass-local table and added to ``.grad`` once per node, so calling
        backward twice without zeroing doubles every gradient exactly.

        Args:
            grad (np.ndarray, optional): Seed gradient. Required unless this node is a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node.requires_grad:
                node.grad += upstream
            if node.creator is None:
                continue
            for inp, g in zip(node.creator.inputs, node.creator.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                if id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + g
                else:
                    pending[id(inp)] = g

    def __add__(self, other):
        """Elementwise sum with broadcasting."""
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        """Elementwise difference with broadcasting."""
        return sub(self, other)

    def __rsub__(self, other):
        """Reflected difference."""
        return sub(constant(other), self)

    def __mul__(self, other):
        """Elementwise product with broadcasting."""
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        """Division by a python number."""
        if isinstance(other, Node):
            raise TypeError("division is only defined by python numbers")
        return mul(self, 1.0 / other)

    def __neg__(self):
        """Negation."""
        return mul(self, -1.0)

    def __repr__(self):
        """Short description."""
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _topological_order(root: Node) -> list:
    """Nodes reachable from root, each exactly once, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for inp in node.creator.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def parameter(data, name: str | None = None) -> Node:
    """A leaf node that takes gradients."""
    return Node(data, requires_grad=True, name=name)


def constant(data) -> Node:
    """A leaf node that takes no gradient."""
    if isinstance(data, Node):
        return data
    return Node(data, requires_grad=False)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so that grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Abs(Function):
    def forward(self, x):
        return np.abs(x)

    def backward(self, grad):
        (x,) = self.inputs
        return (grad * np.sign(x.data),)


class Square(Function):
    def forward(self, x):
        return x * x

    def backward(self, grad):
        (x,) = self.inputs
        return (2.0 * x.data * grad,)


class Sqrt(Function):
    def forward(self, x):
        if np.any(x < 0):
            raise ValueError("sqrt of a negative value")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        # zero subgradient where the output is exactly zero
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad / (2.0 * safe), 0.0),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Sum(Function):
    def forward(self, x, axis=None):
        self.axis = axis
        return np.sum(x, axis=axis)

    def backward(self, grad):
        (x,) = self.inputs
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, x.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        return x.reshape(shape)

    def backward(self, grad):
        (x,) = self.inputs
        return (grad.reshape(x.shape),)


class Slice(Function):
    """Take ``x[start:stop]`` along the leading axis."""

    def forward(self, x, start=0, stop=None):
        self.start, self.stop = start, stop
        return x[start:stop].copy()

    def backward(self, grad):
        (x,) = self.inputs
        out = np.zeros_like(x.data)
        out[self.start : self.stop] = grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        reference = arrays[0].shape
        for i, arr in enumerate(arrays[1:], start=1):
            if arr.ndim != len(reference):
                raise ValueError(f"concat: input {i} has rank {arr.ndim}, expected {len(reference)}")
            for ax, (got, want) in enumerate(zip(arr.shape, reference)):
                if ax != axis and got != want:
                    raise ValueError(f"concat: input {i} has extent {got} on axis {ax}, expected {want}")
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Linear(Function):
    """Affine map ``weight @ x + bias`` over the last axis of x."""

    def forward(self, x, weight, bias):
        if weight.ndim != 2 or weight.shape[1] != x.shape[-1]:
            raise ValueError(f"linear: weight shape {weight.shape} does not accept input length {x.shape[-1]}")
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        return x @ weight.T + bias

    def backward(self, grad):
        x, weight, _ = self.inputs
        g2 = grad.reshape(-1, grad.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return grad @ weight.data, g2.T @ x2, g2.sum(axis=0)


class PReLU(Function):
    """``x`` where positive, ``slope * x`` elsewhere; one slope per channel (leading axis) or a single slope."""

    def forward(self, x, slope):
        self.a = _channel_view(slope, x.ndim)
        self.positive = x > 0
        return np.where(self.positive, x, self.a * x)

    def backward(self, grad):
        x, slope = self.inputs
        gx = np.where(self.positive, grad, self.a * grad)
        ga = np.where(self.positive, 0.0, x.data * grad)
        if slope.size == 1:
            ga = np.array(ga.sum()).reshape(slope.shape)
        else:
            ga = ga.reshape(ga.shape[0], -1).sum(axis=1).reshape(slope.shape)
        return gx, ga


def _channel_view(slope: np.ndarray, ndim: int) -> np.ndarray:
    if slope.size == 1:
        return slope.reshape(())
    return slope.reshape((slope.size,) + (1,) * (ndim - 1))


def _as_tuple(value, n: int, what: str) -> tuple:
    if np.isscalar(value):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ValueError(f"{what} has {len(value)} entries for {n} spatial axes")
    return value


def _window(offset, stride, extent) -> tuple:
    """Strided slice picking, for one kernel offset, the input cells seen by every output cell."""
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, extent))


def _spatial_axes(ndim: int) -> list:
    return list(range(1, ndim))


class Conv(Function):
    """N-d cross-correlation of a ``(C, *S)`` input with a ``(O, C, *K)`` kernel."""

    def forward(self, x, kernel, bias, stride=1, padding=0):
        n = x.ndim - 1
        if kernel.ndim != n + 2:
            raise ValueError(f"conv: kernel rank {kernel.ndim} does not match input with {n} spatial axes")
        if kernel.shape[1] != x.shape[0]:
            raise ValueError(f"conv: kernel expects {kernel.shape[1]} input channels on axis 0, got {x.shape[0]}")
        if bias.shape != (kernel.shape[0],):
            raise ValueError(f"conv: bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        self.stride = _as_tuple(stride, n, "stride")
        self.padding = _as_tuple(padding, n, "padding")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ValueError("conv: stride must be positive and padding nonnegative")
        xp = np.pad(x, [(0, 0)] + [(p, p) for p in self.padding])
        ksize = kernel.shape[2:]
        for axis, (k, extent) in enumerate(zip(ksize, xp.shape[1:])):
            if k > extent:
                raise ValueError(f"conv: kernel extent {k} exceeds padded input extent {extent} on spatial axis {axis}")
        self.out_extent = tuple((e - k) // s + 1 for e, k, s in zip(xp.shape[1:], ksize, self.stride))
        self.xp = xp
        out = np.zeros((kernel.shape[0],) + self.out_extent)
        for offset in itertools.product(*(range(k) for k in ksize)):
            patch = xp[(slice(None),) + _window(offset, self.stride, self.out_extent)]
            out += np.tensordot(kernel[(slice(None), slice(None)) + offset], patch, axes=([1], [0]))
        return out + bias.reshape((-1,) + (1,) * n)

    def backward(self, grad):
        x, kernel, _ = self.inputs
        n = x.ndim - 1
        gxp = np.zeros_like(self.xp)
        gk = np.zeros_like(kernel.data)
        axes = _spatial_axes(n + 1)
        for offset in itertools.product(*(range(k) for k in kernel.shape[2:])):
            window = (slice(None),) + _window(offset, self.stride, self.out_extent)
            k_off = kernel.data[(slice(None), slice(None)) + offset]
            gk[(slice(None), slice(None)) + offset] = np.tensordot(grad, self.xp[window], axes=(axes, axes))
            gxp[window] += np.tensordot(k_off, grad, axes=([0], [0]))
        crop = (slice(None),) + tuple(slice(p, e - p) for p, e in zip(self.padding, gxp.shape[1:]))
        return gxp[crop], gk, grad.sum(axis=tuple(axes))


class Deconv(Function):
    """Transposed convolution: the adjoint of :class:`Conv` for a ``(C_in, C_out, *K)`` kernel."""

    def forward(self, x, kernel, bias, stride=1, padding=0):
        n = x.ndim - 1
        if kernel.ndim != n + 2:
            raise ValueError(f"deconv: kernel rank {kernel.ndim} does not match input with {n} spatial axes")
        if kernel.shape[0] != x.shape[0]:
            raise ValueError(f"deconv: kernel expects {kernel.shape[0]} input channels on axis 0, got {x.shape[0]}")
        if bias.shape != (kernel.shape[1],):
            raise ValueError(f"deconv: bias shape {bias.shape} does not match {kernel.shape[1]} output channels")
        self.stride = _as_tuple(stride, n, "stride")
        self.padding = _as_tuple(padding, n, "padding")
        ksize = kernel.shape[2:]
        full = tuple((e - 1) * s + k for e, s, k in zip(x.shape[1:], self.stride, ksize))
        for axis, (f, p) in enumerate(zip(full, self.padding)):
            if f - 2 * p < 1:
                raise ValueError(f"deconv: padding {p} leaves no output on spatial axis {axis}")
        self.full = full
        out = np.zeros((kernel.shape[1],) + full)
        for offset in itertools.product(*(range(k) for k in ksize)):
            window = (slice(None),) + _window(offset, self.stride, x.shape[1:])
            out[window] += np.tensordot(kernel[(slice(None), slice(None)) + offset], x, axes=([0], [0]))
        crop = (slice(None),) + tuple(slice(p, f - p) for p, f in zip(self.padding, full))
        return out[crop] + bias.reshape((-1,) + (1,) * n)

    def backward(self, grad):
        x, kernel, _ = self.inputs
        n = x.ndim - 1
        gfull = np.pad(grad, [(0, 0)] + [(p, p) for p in self.padding])
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        axes = _spatial_axes(n + 1)
        for offset in itertools.product(*(range(k) for k in kernel.shape[2:])):
            window = (slice(None),) + _window(offset, self.stride, x.shape[1:])
            g_win = gfull[window]
            k_off = kernel.data[(slice(None), slice(None)) + offset]
            gx += np.tensordot(k_off, g_win, axes=([1], [0]))
            gk[(slice(None), slice(None)) + offset] = np.tensordot(x.data, g_win, axes=(axes, axes))
        return gx, gk, grad.sum(axis=tuple(axes))


def _node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def add(a, b) -> Node:
    return Add.apply(_node(a), _node(b))


def sub(a, b) -> Node:
    return Sub.apply(_node(a), _node(b))


def mul(a, b) -> Node:
    return Mul.apply(_node(a), _node(b))


def abs_(x: Node) -> Node:
    return Abs.apply(x)


def square(x: Node) -> Node:
    return Square.apply(x)


def sqrt(x: Node) -> Node:
    return Sqrt.apply(x)


def exp(x: Node) -> Node:
    return Exp.apply(x)


def sigmoid(x: Node) -> Node:
    return Sigmoid.apply(x)


def sum_(x: Node, axis: int | None = None) -> Node:
    return Sum.apply(x, axis=axis)


def mean(x: Node) -> Node:
    return mul(Sum.apply(x), 1.0 / x.size)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    return Reshape.apply(x, shape=tuple(shape))


def slice_channels(x: Node, start: int, stop: int) -> Node:
    """Channels ``start:stop`` of a channel-first node."""
    return Slice.apply(x, start=start, stop=stop)


def concat(inputs: Sequence[Node], axis: int = 0) -> Node:
    """Stack nodes along the channel axis; the gradient is split back by source."""
    if not inputs:
        raise ValueError("concat needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    return Concat.apply(*inputs, axis=axis)


def linear(x: Node, weight: Node, bias: Node) -> Node:
    return Linear.apply(x, weight, bias)


def prelu(x: Node, slope: Node) -> Node:
    return PReLU.apply(x, slope)


def conv(x: Node, kernel: Node, bias: Node, stride=1, padding=0) -> Node:
    """Cross-correlation; output extent is ``floor((in + 2*pad - k) / stride) + 1`` per axis."""
    return Conv.apply(x, kernel, bias, stride=stride, padding=padding)


def deconv(x: Node, kernel: Node, bias: Node, stride=1, padding=0) -> Node:
    """Transposed convolution; output extent is ``(in - 1) * stride - 2 * pad + k`` per axis."""
    return Deconv.apply(x, kernel, bias, stride=stride, padding=padding)


def dropout(x: Node, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout. With no generator (evaluation) or rate 0 the input passes through unchanged."""
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, constant(keep))


def grad_check(fn: Callable[..., Node], inputs: Iterable[Node], h: float = 1e-5, floor: float = 1e-3) -> float:
    """Compare analytic gradients with central finite differences.

    Args:
        fn (Callable[..., Node]): Builds the graph from ``inputs`` and returns a scalar root.
        inputs (Iterable[Node]): Leaf nodes to differentiate; they must have ``requires_grad`` set.
        h (float, optional): Finite-difference step. Defaults to 1e-5.
        floor (float, optional): Smallest gradient magnitude used as the relative-error denominator.

    Returns:
        float: The worst relative error over all input entries.
    """
    inputs = list(inputs)
    for node in inputs:
        node.zero_grad()
    root = fn(*inputs)
    if root.size != 1:
        raise ValueError(f"grad_check needs a scalar root, got shape {root.shape}")
    root.backward()
    worst = 0.0
    for node in inputs:
        analytic = node.grad.copy()
        flat = node.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            plus = fn(*inputs).item()
            flat[i] = saved - h
            minus = fn(*inputs).item()
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic.reshape(-1)[i]
            scale = max(abs(numeric), abs(exact), floor)
            worst = max(worst, abs(numeric - exact) / scale)
    logger.debug("grad_check over %d inputs: worst relative error %.3e", len(inputs), worst)
    return worst
