"""Training loop for FLINT and HyperFLINT.

An epoch is ``steps_per_epoch`` mini-batches of triplets ``(s, t, u)`` sampled from the training members. Each
batch's loss is the mean objective over its triplets, backpropagated through one graph, followed by an AdamW step
at the cosine-annealed learning rate. Validation uses a fixed set of triplets drawn once from the validation members.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from flint_tsr.fieldio import UNIT_TAG, EnsembleSet, FlowGrid, Member, flow_scale, normalize_flow
from flint_tsr.flint import FlintConfig, build_flint, forward_student, forward_teacher, last_block_kernels
from flint_tsr.hyper import (
    FlintStarConfig,
    HyperConfig,
    build_hyperflint,
    flintstar_forward,
    hypernet_forward,
    set_standardization,
)
from flint_tsr.losses import (
    LossParts,
    LossWeights,
    l_dis,
    l_flow,
    l_photo,
    l_reg,
    l_rec,
    total_supervised,
    total_unsupervised,
)
from flint_tsr.params import ModelParams
from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import Node, add, constant, mul
from flint_tsr.types import Boolean, Choice, Float, Int

logger = logging.getLogger(__name__)

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"
HYPER = "hyper"


class DivergenceError(FloatingPointError):
    """The training loss became NaN or infinite."""


class TrainConfig(ConfigStruct):
    """Optimization settings. Defaults are desk scale.

    Full-scale 2D runs anneal 6e-4 -> 6e-6; 3D and parameter-conditioned runs use 1e-4 -> 1e-5 (1e-6).
    """

    max_epochs = Int(low=1, default=300)
    steps_per_epoch = Int(low=1, default=8)
    batch_size = Int(low=1, default=8)
    base_lr = Float(low=0.0, default=6e-4)
    final_lr = Float(low=0.0, default=6e-6)
    weight_decay = Float(low=0.0, default=1e-4)
    patience = Int(low=1, default=30)
    window = Int(low=2, default=12)
    mode = Choice(SUPERVISED, UNSUPERVISED, HYPER, default=SUPERVISED)
    flow_target = Choice("direct", "gap", default="direct")
    val_fraction = Float(low=0.0, high=1.0, default=0.25)
    n_val_triplets = Int(low=1, default=16)
    use_teacher = Boolean(default=True)
    seed = Int(default=0)

    def check(self) -> None:
        """The learning rate may only decrease and must stay positive."""
        if not 0.0 < self.final_lr <= self.base_lr:
            raise ValueError(f"need 0 < final_lr <= base_lr, got {self.final_lr} and {self.base_lr}")


class Triplet(NamedTuple):
    """Two key frames, the ground-truth frame between them and its flow."""

    d_s: np.ndarray
    d_t: np.ndarray
    d_u: np.ndarray
    tau: float
    flow: np.ndarray | None
    s: int
    t: int
    u: int
    sim_params: np.ndarray


def sample_triplet(member: Member, window: int, rng: np.random.Generator) -> Triplet:
    """Draw ``s < t < u`` with ``u - s <= window`` and ``t`` uniform over the interior.

    Arrays come back channel first, ``(1, *dims)`` for frames and ``(rank, *dims)`` for the flow.
    """
    n = len(member.timesteps)
    if n < 3:
        raise ValueError(f"a member needs at least 3 timesteps to sample from, got {n}")
    gap = int(rng.integers(2, min(window, n - 1) + 1))
    s = int(rng.integers(0, n - gap))
    u = s + gap
    t = int(rng.integers(s + 1, u))
    frames = [member.timesteps[k].values[np.newaxis] for k in (s, t, u)]
    flow = member.flows[t].components if member.flows is not None else None
    return Triplet(*frames, (t - s) / (u - s), flow, s, t, u, member.sim_params)


def target_flow(triplet: Triplet, flow_target: str) -> np.ndarray | None:
    """Ground truth for the flow towards the later frame: the velocity itself, or scaled over the gap ``u - t``."""
    if triplet.flow is None:
        return None
    return triplet.flow * (triplet.u - triplet.t) if flow_target == "gap" else triplet.flow


def flow_term(block_flows: Sequence[Node], triplet: Triplet, flow_target: str, gamma: float,
              teacher_flow: Node | None = None, scale: float | None = None) -> Node | None:
    """The flow loss in normalized units, or None when the triplet has no ground-truth flow.

    Target and predicted flows are divided by the same scale before they are compared: ``scale`` (the dataset-wide
    peak, times ``u - t`` for gap targets) when given, otherwise the target's own peak.
    """
    target = target_flow(triplet, flow_target)
    if target is None:
        return None
    if scale is not None and flow_target == "gap":
        scale *= triplet.u - triplet.t
    normalized = normalize_flow(FlowGrid(target), scale)
    inv = 1.0 / normalized.scale
    flows = [mul(flow, inv) for flow in block_flows]
    teacher = None if teacher_flow is None else mul(teacher_flow, inv)
    return l_flow(flows, constant(normalized.grid.components), gamma, teacher)


@dataclass
class AdamState:
    """First and second moments per parameter, and the step count."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def opt_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float, wd: float,
             betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected adaptive step followed by decoupled weight decay ``p -= lr * wd * p``."""
    beta1, beta2 = betas
    state.step += 1
    for name, node in params.trainable().items():
        g = grads[name]
        if g.shape != node.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter shape {node.shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1**state.step)
        v_hat = v / (1.0 - beta2**state.step)
        node.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        node.data -= lr * wd * node.data


class AdamW:
    """Adaptive optimizer with decoupled weight decay over the trainable entries of a ModelParams."""

    def __init__(self, params: ModelParams, weight_decay: float = 0.0):
        """Start from zero moments."""
        self.params = params
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self, lr: float) -> None:
        """Apply the accumulated gradients."""
        grads = {name: node.grad for name, node in self.params.trainable().items()}
        opt_step(self.params, grads, self.state, lr, self.weight_decay)


def cosine_lr(epoch: int, max_epochs: int, base: float, final: float) -> float:
    """Cosine annealing from ``base`` at epoch 0 to ``final`` at ``max_epochs``."""
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * epoch / max_epochs))


class EarlyStopping:
    """Stop once ``patience`` epochs have passed without a new best validation loss."""

    def __init__(self, patience: int):
        """Start with no best value."""
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.stopped = False

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's validation loss; returns True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch = value, epoch
        self.stopped = epoch - self.best_epoch >= self.patience
        return self.stopped


@dataclass
class TrainHistory:
    """Per-epoch losses and learning rates."""

    epoch: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_rec: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def record(self, epoch: int, train_loss: float, val_loss: float, val_rec: float, lr: float) -> None:
        """Append one epoch."""
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_rec.append(val_rec)
        self.lr.append(lr)

    def write_csv(self, path: str | Path) -> None:
        """Write ``epoch,train_loss,val_loss,lr,val_rec`` rows."""
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "val_rec"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.lr, self.val_rec):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def split_members(n: int, val_fraction: float, rng: np.random.Generator) -> Tuple[List[int], List[int]]:
    """Disjoint training and validation member indices."""
    n_val = max(1, int(round(n * val_fraction)))
    if n < 2 or n_val >= n:
        raise ValueError(f"cannot split {n} members into non-empty training and validation sets")
    order = rng.permutation(n)
    return sorted(int(i) for i in order[n_val:]), sorted(int(i) for i in order[:n_val])


def item_objective(params: ModelParams, triplet: Triplet, mode: str, weights: LossWeights, flow_target: str,
                   rng: np.random.Generator | None = None, use_teacher: bool = True,
                   scale: float | None = None) -> Tuple[Node, Node]:
    """The mode's objective on one triplet, and the student's reconstruction error.

    Supervised mode adds the teacher and, when the triplet's member has ground-truth flow, the flow term.
    Unsupervised mode adds the teacher with distillation, photometric and weight penalties. Hyper mode conditions
    the kernels on the triplet's simulation parameters. With ``use_teacher`` off the teacher block is never run and
    every teacher term is left out. ``scale`` is the flow normalization passed to :func:`flow_term`.
    """
    d_s, d_t, d_u = (constant(a) for a in (triplet.d_s, triplet.d_t, triplet.d_u))
    if mode == HYPER:
        theta = hypernet_forward(params, triplet.sim_params, rng)
        result = flintstar_forward(params, theta, d_s, d_u, triplet.tau)
        rec = l_rec(result.prediction, d_t)
        flows = [state.flow_u for state in result.states]
        parts = LossParts(rec, flow_term(flows, triplet, flow_target, weights.gamma, scale=scale))
        return total_supervised(parts, weights), rec
    student = forward_student(params, d_s, d_u, triplet.tau)
    last = student.states[-1]
    teacher = forward_teacher(params, d_s, d_u, triplet.tau, d_t, last) if use_teacher else None
    rec = l_rec(student.prediction, d_t)
    full_rec = rec if teacher is None else l_rec(student.prediction, d_t, teacher.prediction)
    if mode == SUPERVISED:
        flows = [state.flow_u for state in student.states]
        teacher_flow = None if teacher is None else teacher.state.flow_u
        flow_loss = flow_term(flows, triplet, flow_target, weights.gamma, teacher_flow, scale)
        return total_supervised(LossParts(full_rec, flow_loss), weights), rec
    student_kernels, teacher_kernels = last_block_kernels(params)
    parts = LossParts(
        full_rec,
        dis=None if teacher is None else l_dis(last.flow_s, last.flow_u, teacher.state.flow_s, teacher.state.flow_u),
        photo=l_photo(last.flow_s, last.flow_u, d_s, d_u, student.prediction, weights.epsilon),
        reg=l_reg(student_kernels, teacher_kernels if use_teacher else ()),
    )
    return total_unsupervised(parts, weights), rec


def batch_objective(params: ModelParams, batch: Sequence[Triplet], mode: str, weights: LossWeights, flow_target: str,
                    rng: np.random.Generator | None = None, use_teacher: bool = True,
                    scale: float | None = None) -> Tuple[Node, float]:
    """Mean objective over a batch in one graph, and the mean student reconstruction error."""
    total, recs = None, []
    for triplet in batch:
        loss, rec = item_objective(params, triplet, mode, weights, flow_target, rng, use_teacher, scale)
        total = loss if total is None else add(total, loss)
        recs.append(rec.item())
    return mul(total, 1.0 / len(batch)), float(np.mean(recs))


def train_step(params: ModelParams, batch: Sequence[Triplet], cfg: TrainConfig, weights: LossWeights,
               optimizer: AdamW, lr: float, rng: np.random.Generator | None = None,
               scale: float | None = None) -> float:
    """Forward, backward and one optimizer step on a batch; returns the batch loss before the step."""
    loss, _ = batch_objective(params, batch, cfg.mode, weights, cfg.flow_target, rng, cfg.use_teacher, scale)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    params.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return value


def evaluate(params: ModelParams, triplets: Sequence[Triplet], cfg: TrainConfig, weights: LossWeights,
             scale: float | None = None) -> tuple:
    """Mean objective and mean student reconstruction error, without dropout."""
    loss, rec = batch_objective(params, triplets, cfg.mode, weights, cfg.flow_target, None, cfg.use_teacher, scale)
    return loss.item(), rec


def _check_dataset(dataset: EnsembleSet, cfg: TrainConfig, rank: int) -> None:
    if not dataset.members:
        raise ValueError("the dataset has no members")
    if any(g.tag != UNIT_TAG for m in dataset.members for g in m.timesteps):
        raise ValueError("the dataset must be normalized to [0, 1] before training")
    if dataset.rank != rank:
        raise ValueError(f"the dataset has rank {dataset.rank}, the model expects {rank}")
    if cfg.mode == SUPERVISED:
        missing = sum(m.flows is None for m in dataset.members)
        if missing == len(dataset.members):
            raise ValueError("supervised training needs ground-truth flows for at least one member")
        if missing:
            logger.info("%d of %d members have no ground-truth flow; their triplets train without the flow term",
                        missing, len(dataset.members))


def build_model(dataset: EnsembleSet, model_config: FlintConfig | FlintStarConfig, cfg: TrainConfig,
                hyper_config: HyperConfig | None, train_idx: Sequence[int]) -> ModelParams:
    """Fresh parameters for the mode, with standardization statistics for the parameter-conditioned model."""
    if cfg.mode == HYPER:
        if not isinstance(model_config, FlintStarConfig):
            raise TypeError("hyper mode trains a FlintStarConfig model")
        hyper_config = hyper_config or HyperConfig(param_dim=dataset.param_dim)
        if hyper_config.param_dim != dataset.param_dim:
            raise ValueError(
                f"HyperConfig expects {hyper_config.param_dim} parameters, members carry {dataset.param_dim}"
            )
        params = build_hyperflint(hyper_config, model_config, cfg.seed)
        set_standardization(params, dataset.subset(train_idx).param_matrix())
        return params
    if not isinstance(model_config, FlintConfig):
        raise TypeError(f"{cfg.mode} mode trains a FlintConfig model")
    return build_flint(model_config, cfg.seed)


def train(dataset: EnsembleSet, model_config: FlintConfig | FlintStarConfig, cfg: TrainConfig | None = None,
          weights: LossWeights | None = None,
          hyper_config: HyperConfig | None = None) -> Tuple[ModelParams, TrainHistory]:
    """Train a model and return the parameters of the epoch with the lowest validation loss.

    Args:
        dataset (EnsembleSet): Normalized members; split into training and validation by member.
        model_config (FlintConfig | FlintStarConfig): Architecture; FlintStarConfig for hyper mode.
        cfg (TrainConfig, optional): Optimization settings.
        weights (LossWeights, optional): Loss weights.
        hyper_config (HyperConfig, optional): Hypernetwork sizes for hyper mode.

    Returns:
        Tuple[ModelParams, TrainHistory]: Best-validation parameters and the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    _check_dataset(dataset, cfg, model_config.rank)
    split_rng, val_rng, sample_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4)
    )
    train_idx, val_idx = split_members(len(dataset.members), cfg.val_fraction, split_rng)
    params = build_model(dataset, model_config, cfg, hyper_config, train_idx)
    scale = flow_scale(dataset)
    val_members = [dataset.members[val_idx[k % len(val_idx)]] for k in range(cfg.n_val_triplets)]
    val_triplets = [sample_triplet(member, cfg.window, val_rng) for member in val_members]
    optimizer = AdamW(params, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    best = params.snapshot()
    logger.info("training %s on %d members, validating on %d", cfg.mode, len(train_idx), len(val_idx))
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.base_lr, cfg.final_lr)
        losses = []
        for step in range(cfg.steps_per_epoch):
            members = sample_rng.choice(train_idx, size=cfg.batch_size)
            batch = [sample_triplet(dataset.members[int(m)], cfg.window, sample_rng) for m in members]
            try:
                losses.append(train_step(params, batch, cfg, weights, optimizer, lr, dropout_rng, scale))
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from exc
            logger.debug("epoch %d step %d loss %.6g", epoch, step, losses[-1])
        val_loss, val_rec = evaluate(params, val_triplets, cfg, weights, scale)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: validation loss became {val_loss}")
        history.record(epoch, float(np.mean(losses)), val_loss, val_rec, lr)
        if val_loss < stopper.best:
            best = params.snapshot()
        logger.info("epoch %d: train %.6g val %.6g rec %.6g lr %.3g", epoch, history.train_loss[-1], val_loss,
                    val_rec, lr)
        if stopper.update(epoch, val_loss):
            history.stopped_early = True
            logger.warning("early stop at epoch %d, best epoch %d", epoch, stopper.best_epoch)
            break
    history.best_epoch = stopper.best_epoch
    params.restore(best)
    return params, history
