"""Parameter-conditioned interpolation: a hypernetwork emitting the convolution kernels of a three-block FLINT.

The hypernetwork maps a standardized simulation-parameter vector through three linear layers (PReLU, dropout after
the first two), a two-layer 1D convolution stage and a final linear layer to a flat weight vector ``theta``.
``theta`` is cut into the kernels of every body layer of every block ("slots"); the heads, all biases and all PReLU
slopes stay static parameters. Static and hypernetwork tensors live in one ModelParams under ``block*`` and
``hyper.*`` names respectively.
"""

import logging
from collections import ChainMap
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from flint_tsr.fieldio import EnsembleSet, Grid
from flint_tsr.flint import BlockStackConfig, BlockState, as_node, init_layer, run_student, student_layers, to_flow_grid
from flint_tsr.params import ModelParams
from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import Node, constant, conv, dropout, linear, parameter, prelu, reshape, slice_channels
from flint_tsr.types import Array, Boolean, Float, Int

logger = logging.getLogger(__name__)

PREFIX = "hyper"
FINAL_SCALE = 0.1
SLOPE_INIT = 0.25


class FlintStarConfig(BlockStackConfig):
    """Three blocks of five body layers each, no teacher."""

    n_blocks = Int(low=2, default=3)
    channels = Array(Int(low=1), default=[128, 96, 64])
    n_mid = Int(low=0, default=3)


class HyperConfig(ConfigStruct):
    """Hypernetwork sizes. ``use_mlp``/``use_cnn`` drop a stage; ``dropout = 0`` drops the dropout layers."""

    param_dim = Int(low=1, default=2)
    hidden = Array(Int(low=1), 3, default=[32, 64, 64])
    dropout = Float(low=0.0, high=0.95, default=0.1)
    conv_channels = Int(low=1, default=4)
    conv_kernel = Int(low=1, default=3)
    use_mlp = Boolean(default=True)
    use_cnn = Boolean(default=True)

    def check(self) -> None:
        """The conv stage needs an odd kernel and an MLP output that splits evenly into channels."""
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.use_mlp and self.use_cnn and self.hidden[2] % self.conv_channels:
            raise ValueError(f"hidden[2] = {self.hidden[2]} is not a multiple of conv_channels = {self.conv_channels}")

    def mlp_out(self) -> int:
        """Length of the vector entering the conv stage."""
        return self.hidden[2] if self.use_mlp else self.param_dim

    def conv_in(self) -> int:
        """Channels of the reshaped MLP output."""
        return self.conv_channels if self.use_mlp else 1

    def flat_len(self) -> int:
        """Length of the vector entering the final linear layer."""
        if not self.use_cnn:
            return self.mlp_out()
        return self.conv_channels * (self.mlp_out() // self.conv_in())


class Slot(NamedTuple):
    """A kernel of the conditioned network filled from theta."""

    name: str
    shape: tuple

    @property
    def size(self) -> int:
        """Number of entries."""
        return int(np.prod(self.shape))


def target_slots(cfg: FlintStarConfig) -> List[Slot]:
    """Every body-layer kernel of every block, in block then layer order."""
    slots = []
    for i in range(cfg.n_blocks):
        body = [layer for layer in student_layers(cfg, i) if layer.activation]
        slots += [Slot(f"{layer.name}.weight", layer.kernel_shape) for layer in body]
    return slots


def theta_len(cfg: FlintStarConfig) -> int:
    """Total number of emitted weights."""
    return sum(slot.size for slot in target_slots(cfg))


def _dense(params: ModelParams, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    bound = np.sqrt(1.0 / n_in)
    params[f"{name}.weight"] = parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
    params[f"{name}.bias"] = parameter(rng.uniform(-bound, bound, size=n_out))


def build_hyperflint(hcfg: HyperConfig, cfg: FlintStarConfig, rng_seed: int = 0) -> ModelParams:
    """Create the static network tensors and the hypernetwork, deterministic under the seed.

    The final layer's bias starts at a regular initialization of every slot kernel and its weight is small, so an
    untrained hypernetwork emits ordinary initial kernels that vary slightly with the parameters.
    """
    rng = np.random.default_rng(rng_seed)
    params = ModelParams(cfg, hcfg)
    inits, row_bounds = [], []
    for i in range(cfg.n_blocks):
        for layer in student_layers(cfg, i):
            w = init_layer(params, layer, rng, cfg.zero_head, weight=not layer.activation)
            if layer.activation:
                inits.append(w.reshape(-1))
                row_bounds.append(np.full(w.size, np.sqrt(1.0 / layer.fan_in)))
    if hcfg.use_mlp:
        sizes = [hcfg.param_dim] + list(hcfg.hidden)
        for j in range(3):
            _dense(params, f"{PREFIX}.fc{j}", sizes[j], sizes[j + 1], rng)
            params[f"{PREFIX}.fc{j}.slope"] = parameter(np.full(1, SLOPE_INIT))
    if hcfg.use_cnn:
        k, cc = hcfg.conv_kernel, hcfg.conv_channels
        for j, c_in in enumerate((hcfg.conv_in(), cc)):
            bound = np.sqrt(1.0 / (c_in * k))
            params[f"{PREFIX}.conv{j}.weight"] = parameter(rng.uniform(-bound, bound, size=(cc, c_in, k)))
            params[f"{PREFIX}.conv{j}.bias"] = parameter(rng.uniform(-bound, bound, size=cc))
            params[f"{PREFIX}.conv{j}.slope"] = parameter(np.full(cc, SLOPE_INIT))
    flat = hcfg.flat_len()
    bounds = np.concatenate(row_bounds)[:, np.newaxis]
    weight = rng.uniform(-1.0, 1.0, size=(bounds.size, flat)) * bounds * FINAL_SCALE / np.sqrt(flat)
    params[f"{PREFIX}.out.weight"] = parameter(weight)
    params[f"{PREFIX}.out.bias"] = parameter(np.concatenate(inits))
    params[f"{PREFIX}.param_mean"] = constant(np.zeros(hcfg.param_dim))
    params[f"{PREFIX}.param_std"] = constant(np.ones(hcfg.param_dim))
    logger.info("built HyperFLINT: theta length %d, %d trainable entries", bounds.size, params.count())
    return params


def set_standardization(params: ModelParams, param_matrix: np.ndarray) -> None:
    """Store the per-parameter mean and standard deviation of the training members (zero spread maps to 1)."""
    param_matrix = np.atleast_2d(np.asarray(param_matrix, dtype=np.float64))
    std = param_matrix.std(axis=0)
    params[f"{PREFIX}.param_mean"] = constant(param_matrix.mean(axis=0))
    params[f"{PREFIX}.param_std"] = constant(np.where(std > 0.0, std, 1.0))


def hypernet_forward(hparams: ModelParams, sim_params, rng: np.random.Generator | None = None) -> Node:
    """Map one simulation-parameter vector to the flat weight vector theta.

    Args:
        hparams (ModelParams): Parameters holding the hypernetwork and its HyperConfig.
        sim_params (array-like): Raw (unstandardized) parameter vector of length ``param_dim``.
        rng (np.random.Generator, optional): Dropout draws; None evaluates deterministically.

    Returns:
        Node: theta, differentiable with respect to every hypernetwork tensor.
    """
    hcfg = hparams.get_config(HyperConfig)
    p = np.asarray(sim_params, dtype=np.float64).reshape(-1)
    if p.size != hcfg.param_dim:
        raise ValueError(f"expected {hcfg.param_dim} simulation parameters, got {p.size}")
    mu, sd = hparams[f"{PREFIX}.param_mean"].data, hparams[f"{PREFIX}.param_std"].data
    x = constant((p - mu) / sd)
    if hcfg.use_mlp:
        for j in range(3):
            name = f"{PREFIX}.fc{j}"
            x = prelu(linear(x, hparams[f"{name}.weight"], hparams[f"{name}.bias"]), hparams[f"{name}.slope"])
            if j < 2:
                x = dropout(x, hcfg.dropout, rng)
    if hcfg.use_cnn:
        x = reshape(x, (hcfg.conv_in(), hcfg.mlp_out() // hcfg.conv_in()))
        for j in range(2):
            name = f"{PREFIX}.conv{j}"
            x = conv(x, hparams[f"{name}.weight"], hparams[f"{name}.bias"], padding=hcfg.conv_kernel // 2)
            x = prelu(x, hparams[f"{name}.slope"])
        x = reshape(x, (hcfg.flat_len(),))
    return linear(x, hparams[f"{PREFIX}.out.weight"], hparams[f"{PREFIX}.out.bias"])


def slice_theta(theta: Node, cfg: FlintStarConfig) -> Dict[str, Node]:
    """Cut theta into the slot kernels, in slot order."""
    slots = target_slots(cfg)
    total = sum(slot.size for slot in slots)
    if theta.shape != (total,):
        raise ValueError(f"theta has shape {theta.shape}, the slots need {total} entries")
    out, offset = {}, 0
    for slot in slots:
        out[slot.name] = reshape(slice_channels(theta, offset, offset + slot.size), slot.shape)
        offset += slot.size
    return out


class FlintStarPass(NamedTuple):
    """Block states, interpolant and the final flow towards the later frame."""

    states: List[BlockState]
    prediction: Node
    flow: Node


def flintstar_forward(static_params: ModelParams, theta: Node, d_s: Node, d_u: Node, tau: float) -> FlintStarPass:
    """Run the student pipeline with slot kernels taken from theta and everything else from ``static_params``."""
    cfg = static_params.get_config(FlintStarConfig)
    result = run_student(ChainMap(slice_theta(theta, cfg), static_params), cfg, d_s, d_u, tau)
    return FlintStarPass(result.states, result.prediction, result.states[-1].flow_u)


def hyper_infer(params: ModelParams, sim_params, d_s, d_u, tau: float) -> tuple:
    """Evaluation-mode interpolation for one parameter vector; returns ``(Grid, FlowGrid)``."""
    theta = hypernet_forward(params, sim_params)
    result = flintstar_forward(params, theta, as_node(d_s), as_node(d_u), tau)
    return Grid(result.prediction.data[0].copy()), to_flow_grid(result.flow)


def theta_matrix(hparams: ModelParams, param_sets: Sequence) -> np.ndarray:
    """theta for every parameter vector, one per row."""
    return np.stack([hypernet_forward(hparams, p).data for p in param_sets])


def weight_similarity_matrix(hparams: ModelParams, param_sets: Sequence) -> np.ndarray:
    """Pairwise Euclidean distances between the emitted weight vectors."""
    if len(param_sets) < 2:
        raise ValueError("need at least two parameter sets")
    return squareform(pdist(theta_matrix(hparams, param_sets)))


def data_distance_matrix(dataset: EnsembleSet) -> np.ndarray:
    """Pairwise Euclidean distances between members' flattened fields."""
    return squareform(pdist(np.stack([m.flattened() for m in dataset.members])))


def neighbor_agreement(first: np.ndarray, second: np.ndarray) -> float:
    """Fraction of rows whose nearest other row is the same under both distance matrices."""
    a, b = np.array(first, dtype=np.float64), np.array(second, dtype=np.float64)
    np.fill_diagonal(a, np.inf)
    np.fill_diagonal(b, np.inf)
    return float(np.mean(np.argmin(a, axis=1) == np.argmin(b, axis=1)))


def triplet_agreement(data_dist: np.ndarray, theta_dist: np.ndarray, n_triplets: int,
                      rng: np.random.Generator) -> float:
    """Fraction of random (anchor, i, j) triplets whose distance order agrees in both matrices.

    Triplets whose data-space distances tie carry no order and are redrawn; a tie in theta space counts as a
    disagreement.
    """
    n = data_dist.shape[0]
    if n < 3:
        raise ValueError(f"triplets need at least 3 members, got {n}")
    agree, drawn, attempts = 0, 0, 0
    while drawn < n_triplets:
        attempts += 1
        if attempts > 100 * n_triplets:
            raise ValueError("data-space distances tie for every sampled triplet")
        anchor, i, j = rng.choice(n, size=3, replace=False)
        d = data_dist[anchor, i] - data_dist[anchor, j]
        if d == 0.0:
            continue
        drawn += 1
        agree += int(np.sign(d) == np.sign(theta_dist[anchor, i] - theta_dist[anchor, j]))
    return agree / n_triplets


def triplet_correlation(hparams: ModelParams, dataset: EnsembleSet, n_triplets: int = 1000,
                        rng_seed: int = 0) -> float:
    """How often theta-space distances between members keep the order of their data-space distances."""
    if len(dataset.members) < 3:
        raise ValueError(f"triplet correlation needs at least 3 members, got {len(dataset.members)}")
    thetas = squareform(pdist(theta_matrix(hparams, [m.sim_params for m in dataset.members])))
    score = triplet_agreement(data_distance_matrix(dataset), thetas, n_triplets, np.random.default_rng(rng_seed))
    logger.info("triplet correlation over %d triplets: %.3f", n_triplets, score)
    return score


def sweep(base, index: int, values: Sequence[float]) -> List[np.ndarray]:
    """Copies of ``base`` with entry ``index`` replaced by each value in turn."""
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if not 0 <= index < base.size:
        raise ValueError(f"sweep index {index} is out of range for {base.size} parameters")
    points = []
    for v in values:
        p = base.copy()
        p[index] = v
        points.append(p)
    return points
