"""The FLINT student-teacher network: stacked convolutional blocks refining two flows and a fusion mask.

Every block runs ``conv (stride 2) -> n_mid convs (stride 1) -> deconv (stride 2) -> head``, each body layer followed
by a per-channel PReLU. The head emits ``2 * rank + 1`` channels: the flow towards the earlier frame, the flow towards
the later frame and the mask logits. Block 0 sees ``(D_s, D_u, tau)``; later blocks also see the fields warped by the
previous block, its flows and its mask, and add their head output to the previous flows and logits. The teacher is
one more block of the same shape that additionally sees the ground-truth frame.
"""

import logging
from typing import List, Mapping, NamedTuple, Sequence

import numpy as np

from flint_tsr.fieldio import FlowGrid, Grid
from flint_tsr.params import ModelParams
from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import Node, concat, constant, conv, deconv, parameter, prelu, sigmoid, slice_channels
from flint_tsr.types import Array, Boolean, Int
from flint_tsr.warp import backward_warp, fuse

logger = logging.getLogger(__name__)

# allow magic value comparison
# ruff: noqa: PLR2004

TEACHER = "teacher"
PRELU_INIT = 0.25


class BlockStackConfig(ConfigStruct):
    """Members shared by every stack of refinement blocks."""

    n_blocks = Int(low=2, default=4)
    channels = Array(Int(low=1), default=[256, 192, 192, 128])
    rank = Int(low=2, default=2)
    desk_scale = Int(low=1, default=1)
    n_mid = Int(low=0, default=2)
    strided = Boolean(default=True)
    zero_head = Boolean(default=True)

    def check(self) -> None:
        """One channel width per block, rank 2 or 3."""
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"{len(self.channels)} channel widths for {self.n_blocks} blocks")

    def widths(self) -> List[int]:
        """Channel widths after applying the desk-scale divisor."""
        return [max(1, c // self.desk_scale) for c in self.channels]


class FlintConfig(BlockStackConfig):
    """Student blocks plus the teacher block. Full scale is the default; ``desk_scale = 8`` suits toy runs."""

    teacher_channels = Int(low=1, default=128)

    def teacher_width(self) -> int:
        """Teacher channel width after the desk-scale divisor."""
        return max(1, self.teacher_channels // self.desk_scale)


class Layer(NamedTuple):
    """One convolutional layer of a block."""

    name: str
    kind: str
    kernel_shape: tuple
    stride: int
    padding: int
    activation: bool

    @property
    def out_channels(self) -> int:
        """Channels produced by the layer."""
        return self.kernel_shape[1] if self.kind == "deconv" else self.kernel_shape[0]

    @property
    def fan_in(self) -> int:
        """Second kernel axis times the kernel volume."""
        return int(np.prod(self.kernel_shape[1:]))


def block_layers(prefix: str, in_ch: int, width: int, cfg: BlockStackConfig) -> List[Layer]:
    """Layer list of one block; with ``strided`` off every layer keeps the input resolution."""
    rank, out_ch = cfg.rank, 2 * cfg.rank + 1
    k3 = (3,) * rank
    down = 2 if cfg.strided else 1
    layers = [Layer(f"{prefix}.conv0", "conv", (width, in_ch) + k3, down, 1, True)]
    for j in range(1, cfg.n_mid + 1):
        layers.append(Layer(f"{prefix}.conv{j}", "conv", (width, width) + k3, 1, 1, True))
    if cfg.strided:
        layers.append(Layer(f"{prefix}.deconv", "deconv", (width, width) + (4,) * rank, 2, 1, True))
    else:
        layers.append(Layer(f"{prefix}.deconv", "deconv", (width, width) + k3, 1, 1, True))
    layers.append(Layer(f"{prefix}.head", "conv", (out_ch, width) + k3, 1, 1, False))
    return layers


def block_in_channels(index: int, rank: int, teacher: bool = False) -> int:
    """Input channels of block ``index``: 3 for the first block, ``6 + 2 * rank`` after, one more for the teacher."""
    base = 3 if index == 0 and not teacher else 6 + 2 * rank
    return base + (1 if teacher else 0)


def student_layers(cfg: BlockStackConfig, index: int) -> List[Layer]:
    """Layers of student block ``index``."""
    return block_layers(f"block{index}", block_in_channels(index, cfg.rank), cfg.widths()[index], cfg)


def teacher_layers(cfg: FlintConfig) -> List[Layer]:
    """Layers of the teacher block."""
    in_ch = block_in_channels(cfg.n_blocks, cfg.rank, teacher=True)
    return block_layers(TEACHER, in_ch, cfg.teacher_width(), cfg)


def flint_layout(cfg: FlintConfig) -> List[List[Layer]]:
    """Layers of every student block followed by the teacher block."""
    return [student_layers(cfg, i) for i in range(cfg.n_blocks)] + [teacher_layers(cfg)]


def init_layer(params: ModelParams, layer: Layer, rng: np.random.Generator, zero_head: bool,
               weight: bool = True) -> np.ndarray:
    """Initialize one layer uniformly in ``+-sqrt(1 / fan_in)``; a head may start at zero.

    With ``weight`` off the kernel is drawn but not stored; it is returned either way.
    """
    bound = np.sqrt(1.0 / layer.fan_in)
    is_head = not layer.activation
    w = rng.uniform(-bound, bound, size=layer.kernel_shape)
    b = rng.uniform(-bound, bound, size=(layer.out_channels,))
    if is_head and zero_head:
        w, b = np.zeros_like(w), np.zeros_like(b)
    if weight:
        params[f"{layer.name}.weight"] = parameter(w)
    params[f"{layer.name}.bias"] = parameter(b)
    if layer.activation:
        params[f"{layer.name}.slope"] = parameter(np.full(layer.out_channels, PRELU_INIT))
    return w


def build_flint(cfg: FlintConfig, rng_seed: int = 0) -> ModelParams:
    """Create the parameters of all student blocks and the teacher block, deterministic under the seed."""
    if any(c < 1 for c in cfg.channels):
        raise ValueError(f"invalid channel list {cfg.channels}")
    rng = np.random.default_rng(rng_seed)
    params = ModelParams(cfg)
    for block in flint_layout(cfg):
        for layer in block:
            init_layer(params, layer, rng, cfg.zero_head)
    logger.info("built FLINT with %d blocks and %d parameters", cfg.n_blocks, params.count())
    return params


def run_layers(lookup: Mapping[str, Node], layers: Sequence[Layer], x: Node) -> Node:
    """Apply a block's layers; weights are looked up by name so they may come from any mapping."""
    for layer in layers:
        weight, bias = lookup[f"{layer.name}.weight"], lookup[f"{layer.name}.bias"]
        if layer.kind == "deconv":
            x = deconv(x, weight, bias, stride=layer.stride, padding=layer.padding)
        else:
            x = conv(x, weight, bias, stride=layer.stride, padding=layer.padding)
        if layer.activation:
            x = prelu(x, lookup[f"{layer.name}.slope"])
    return x


class BlockState:
    """Flows and mask logits estimated by one block, with the fields warped by its flows."""

    def __init__(self, flow_s: Node, flow_u: Node, mask_logits: Node, index: int, d_s: Node, d_u: Node):
        """Warp both input fields by the block's flows."""
        self.flow_s = flow_s
        self.flow_u = flow_u
        self.mask_logits = mask_logits
        self.index = index
        self.warped_s = backward_warp(d_s, flow_s)
        self.warped_u = backward_warp(d_u, flow_u)
        self._mask = None

    @property
    def mask(self) -> Node:
        """Fusion mask, strictly inside (0, 1)."""
        if self._mask is None:
            self._mask = sigmoid(self.mask_logits)
        return self._mask

    def fused(self) -> Node:
        """The interpolant from this block's warps and mask."""
        return fuse(self.warped_s, self.warped_u, self.mask)

    def features(self) -> List[Node]:
        """What the next block sees of this one."""
        return [self.warped_s, self.warped_u, self.flow_s, self.flow_u, self.mask]


class StudentPass(NamedTuple):
    """Every student block state and the final interpolant."""

    states: List[BlockState]
    prediction: Node


class TeacherPass(NamedTuple):
    """The teacher block state and its interpolant."""

    state: BlockState
    prediction: Node


def as_node(field) -> Node:
    """Wrap a Grid, an array or a Node as a channel-first single-channel node."""
    if isinstance(field, Node):
        return field
    if isinstance(field, Grid):
        field = field.values
    field = np.asarray(field, dtype=np.float64)
    return constant(field[np.newaxis])


def _check_inputs(d_s: Node, d_u: Node, tau: float, rank: int) -> None:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie strictly inside (0, 1), got {tau}")
    if d_s.shape != d_u.shape:
        raise ValueError(f"D_s shape {d_s.shape} differs from D_u shape {d_u.shape}")
    if d_s.ndim - 1 != rank:
        raise ValueError(f"inputs have {d_s.ndim - 1} spatial axes, the model expects {rank}")
    for axis, n in enumerate(d_s.shape[1:]):
        if n % 2:
            raise ValueError(f"spatial extent {n} on axis {axis} must be even")


def _tau_channel(d_s: Node, tau: float) -> Node:
    return constant(np.full(d_s.shape, tau))


def run_block(lookup: Mapping[str, Node], layers: Sequence[Layer], inputs: List[Node], index: int,
              d_s: Node, d_u: Node, rank: int, previous: BlockState | None = None) -> BlockState:
    """Run one block and turn its head into a BlockState, residual on ``previous`` when given."""
    head = run_layers(lookup, layers, concat(inputs))
    flow_s = slice_channels(head, 0, rank)
    flow_u = slice_channels(head, rank, 2 * rank)
    logits = slice_channels(head, 2 * rank, 2 * rank + 1)
    if previous is not None:
        flow_s = flow_s + previous.flow_s
        flow_u = flow_u + previous.flow_u
        logits = logits + previous.mask_logits
    return BlockState(flow_s, flow_u, logits, index, d_s, d_u)


def run_student(lookup: Mapping[str, Node], cfg: BlockStackConfig, d_s: Node, d_u: Node, tau: float) -> StudentPass:
    """The student pipeline over any weight mapping, shared by FLINT and its parameter-conditioned variant."""
    _check_inputs(d_s, d_u, tau, cfg.rank)
    tau_c = _tau_channel(d_s, tau)
    states: List[BlockState] = []
    for i in range(cfg.n_blocks):
        previous = states[-1] if states else None
        inputs = [d_s, d_u] + (previous.features() if previous else []) + [tau_c]
        states.append(run_block(lookup, student_layers(cfg, i), inputs, i, d_s, d_u, cfg.rank, previous))
    return StudentPass(states, states[-1].fused())


def forward_student(params: ModelParams, d_s: Node, d_u: Node, tau: float) -> StudentPass:
    """Estimate both intermediate flows and the mask block by block, then fuse the last block's warps.

    Args:
        params (ModelParams): FLINT parameters with their FlintConfig attached.
        d_s (Node): Earlier frame, ``(1, *dims)``, unit-normalized.
        d_u (Node): Later frame, same shape.
        tau (float): Fractional position ``(t - s) / (u - s)`` in (0, 1).

    Returns:
        StudentPass: One BlockState per block and the interpolant.
    """
    return run_student(params, params.get_config(FlintConfig), d_s, d_u, tau)


def forward_teacher(params: ModelParams, d_s: Node, d_u: Node, tau: float, d_gt: Node | None,
                    last: BlockState) -> TeacherPass:
    """Run the teacher block on the student's last state with the ground-truth frame appended."""
    if d_gt is None:
        raise ValueError("the teacher block needs the ground-truth frame")
    if d_gt.shape != d_s.shape:
        raise ValueError(f"ground truth shape {d_gt.shape} differs from input shape {d_s.shape}")
    cfg = params.get_config(FlintConfig)
    inputs = [d_s, d_u] + last.features() + [_tau_channel(d_s, tau), d_gt]
    state = run_block(params, teacher_layers(cfg), inputs, cfg.n_blocks, d_s, d_u, cfg.rank, last)
    return TeacherPass(state, state.fused())


def to_flow_grid(flow: Node) -> FlowGrid:
    """Copy a flow node out of the graph."""
    return FlowGrid(flow.data.copy())


def infer(params: ModelParams, d_s, d_u, tau: float) -> tuple:
    """Interpolate the frame at ``tau`` between two frames with the student alone.

    Returns:
        tuple: ``(Grid, FlowGrid)``: the interpolant and the last block's flow towards the later frame.
    """
    result = forward_student(params, as_node(d_s), as_node(d_u), tau)
    values = result.prediction.data[0].copy()
    return Grid(values), to_flow_grid(result.states[-1].flow_u)


def last_block_kernels(params: ModelParams) -> tuple:
    """Kernels of the last student block and of the teacher block."""
    cfg = params.get_config(FlintConfig)
    last = f"block{cfg.n_blocks - 1}."
    student = [node for name, node in params.items() if name.startswith(last) and name.endswith(".weight")]
    teacher = [node for name, node in params.items() if name.startswith(TEACHER + ".") and name.endswith(".weight")]
    return student, teacher
