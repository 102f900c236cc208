"""Embedding backends: PCA by deflated power iteration, and dense autoencoders (plain, sparse, beta-VAE)."""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from flint_tsr.evalkit import Embedding2D
from flint_tsr.fieldio import EnsembleSet
from flint_tsr.params import ModelParams
from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import (
    Node,
    abs_,
    add,
    constant,
    exp,
    linear,
    mean,
    mul,
    parameter,
    prelu,
    sigmoid,
    square,
    sub,
    sum_,
)
from flint_tsr.trainer import AdamW
from flint_tsr.types import Choice, Float, Int

logger = logging.getLogger(__name__)

# allow magic value comparison
# ruff: noqa: PLR2004

PLAIN = "plain"
SPARSE = "sparse"
BETA_VAE = "beta_vae"


@dataclass
class PcaModel:
    """Standardization statistics and the top principal axes (one per column)."""

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    variances: np.ndarray

    @property
    def k(self) -> int:
        """Number of kept components."""
        return self.components.shape[1]


def _orthogonalize(v: np.ndarray, basis: List[np.ndarray]) -> np.ndarray:
    # two Gram-Schmidt sweeps keep the basis orthonormal to round-off
    for _ in range(2):
        for b in basis:
            v = v - (b @ v) * b
    return v


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def power_eigs(matrix: np.ndarray, k: int, tol: float = 1e-10, max_iter: int = 10_000) -> tuple:
    """Top-k eigenpairs of a symmetric positive semi-definite matrix by deflated power iteration.

    Directions in the numerical null space come back as arbitrary unit vectors orthogonal to the others, with
    eigenvalue close to zero.
    """
    size = matrix.shape[0]
    work = matrix.copy()
    rng = np.random.default_rng(0)
    vecs, vals = [], []
    top = None
    for _ in range(k):
        v = _orthogonalize(rng.standard_normal(size), vecs)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = _orthogonalize(work @ v, vecs)
            norm = np.linalg.norm(w)
            if top is not None and norm <= 1e-12 * max(top, 1e-300):
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        v = _fix_sign(v)
        lam = float(v @ matrix @ v)
        top = lam if top is None else top
        vecs.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    order = np.argsort(-np.asarray(vals), kind="stable")
    return np.stack([vecs[i] for i in order], axis=1), np.asarray(vals)[order]


def pca_fit(data, k: int, tol: float = 1e-10, max_iter: int = 10_000) -> PcaModel:
    """Z-score the rows, then keep the top-k eigenvectors of the covariance.

    Constant features get scale 1. When there are more features than rows the eigenvectors come from the Gram
    matrix and are mapped back to feature space.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2D data matrix, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k = {k} must lie in [1, {min(n, d)}] for a {n} x {d} matrix")
    center = x.mean(axis=0)
    scale = x.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    scale = np.where(scale > 0.0, scale, 1.0)
    z = (x - center) / scale
    denom = max(n - 1, 1)
    if d > n:
        vecs, vals = power_eigs(z @ z.T / denom, k, tol, max_iter)
        comps = []
        for i in range(k):
            c = _orthogonalize(z.T @ vecs[:, i], comps)
            norm = np.linalg.norm(c)
            if norm <= 1e-12 * max(np.linalg.norm(z), 1e-300):
                c = _orthogonalize(np.eye(d)[len(comps) % d], comps)
                norm = np.linalg.norm(c)
            comps.append(_fix_sign(c / norm))
        components = np.stack(comps, axis=1)
    else:
        components, vals = power_eigs(z.T @ z / denom, k, tol, max_iter)
    logger.debug("pca: %d components, variances %s", k, vals)
    return PcaModel(center, scale, components, np.maximum(vals, 0.0))


def pca_project(model: PcaModel, rows) -> np.ndarray:
    """Coordinates of the rows along the kept components."""
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if x.shape[1] != model.mean.size:
        raise ValueError(f"rows have {x.shape[1]} features, the model was fit on {model.mean.size}")
    return ((x - model.mean) / model.scale) @ model.components


def pca_reconstruct(model: PcaModel, coords) -> np.ndarray:
    """Map projected coordinates back to feature space."""
    return np.atleast_2d(coords) @ model.components.T * model.scale + model.mean


class EncoderConfig(ConfigStruct):
    """Dense autoencoder. Hidden widths halve from the input down towards the latent size."""

    input_dim = Int(low=1, default=1024)
    latent_dim = Int(low=1, default=2)
    n_layers = Int(low=1, default=2)
    variant = Choice(PLAIN, SPARSE, BETA_VAE, default=PLAIN)
    beta = Float(low=0.0, default=1.0)
    l1 = Float(low=0.0, default=1e-4)
    l2 = Float(low=0.0, default=1e-5)
    lr = Float(low=0.0, default=5e-4)
    epochs = Int(low=1, default=50)
    batch_size = Int(low=1, default=16)
    seed = Int(default=0)

    def widths(self) -> List[int]:
        """Encoder widths from the input to the last hidden layer."""
        widths = [self.input_dim]
        for _ in range(self.n_layers):
            widths.append(max(self.latent_dim, widths[-1] // 2))
        return widths


class LatentEncoder:
    """Encoder and mirrored decoder parameters."""

    def __init__(self, cfg: EncoderConfig):
        """Initialize every dense layer uniformly in ``+-sqrt(1 / fan_in)``."""
        self.cfg = cfg
        self.params = ModelParams(cfg)
        self.trained = False
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths()
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            self._dense(f"enc{i}", n_in, n_out, rng, activation=True)
        heads = ["enc.mu", "enc.log_sigma"] if cfg.variant == BETA_VAE else ["enc.out"]
        for name in heads:
            self._dense(name, widths[-1], cfg.latent_dim, rng)
        back = [cfg.latent_dim] + widths[::-1]
        for i, (n_in, n_out) in enumerate(zip(back[:-1], back[1:])):
            last = i == len(back) - 2
            self._dense("dec.out" if last else f"dec{i}", n_in, n_out, rng, activation=not last)

    def _dense(self, name: str, n_in: int, n_out: int, rng: np.random.Generator, activation: bool = False):
        bound = np.sqrt(1.0 / n_in)
        self.params[f"{name}.weight"] = parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.params[f"{name}.bias"] = parameter(rng.uniform(-bound, bound, size=n_out))
        if activation:
            self.params[f"{name}.slope"] = parameter(np.full(1, 0.25))

    def _layer(self, name: str, x: Node) -> Node:
        x = linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        slope = self.params.get(f"{name}.slope")
        return x if slope is None else prelu(x, slope)

    def encoder_graph(self, x: Node) -> tuple:
        """``(mu, log_sigma)`` for the beta-VAE, ``(latent, None)`` otherwise."""
        for i in range(self.cfg.n_layers):
            x = self._layer(f"enc{i}", x)
        if self.cfg.variant == BETA_VAE:
            return self._layer("enc.mu", x), self._layer("enc.log_sigma", x)
        return self._layer("enc.out", x), None

    def decoder_graph(self, z: Node) -> Node:
        """Reconstruction in (0, 1)."""
        for i in range(self.cfg.n_layers):
            z = self._layer(f"dec{i}", z)
        return sigmoid(self._layer("dec.out", z))

    def weights(self) -> List[Node]:
        """Every dense weight matrix."""
        return [node for name, node in self.params.items() if name.endswith(".weight")]


def _rows(x) -> Node:
    return x if isinstance(x, Node) else constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def encode(enc: LatentEncoder, x) -> np.ndarray:
    """Latent codes (the mean for the beta-VAE) of flattened rows."""
    latent, _ = enc.encoder_graph(_rows(x))
    return latent.data.copy()


def decode(enc: LatentEncoder, z) -> np.ndarray:
    """Reconstructions of latent codes."""
    return enc.decoder_graph(_rows(z)).data.copy()


def sparse_penalty(enc: LatentEncoder, l1: float, l2: float) -> Node:
    """``l1 * |W_final|_1 + l2 * sum(W**2)`` over the final encoder weight and all weights respectively."""
    penalty = mul(sum_(abs_(enc.params["enc.out.weight"])), l1)
    for w in enc.weights():
        penalty = add(penalty, mul(sum_(square(w)), l2))
    return penalty


def ae_loss(enc: LatentEncoder, x) -> Node:
    """Mean squared reconstruction error, plus the sparsity penalty for the sparse variant."""
    x = _rows(x)
    latent, _ = enc.encoder_graph(x)
    loss = mean(square(sub(enc.decoder_graph(latent), x)))
    if enc.cfg.variant == SPARSE:
        loss = add(loss, sparse_penalty(enc, enc.cfg.l1, enc.cfg.l2))
    return loss


def kl_divergence(mu: Node, log_sigma: Node) -> Node:
    """Closed-form KL of ``N(mu, sigma^2)`` from the standard normal, summed over latent dims, averaged over rows."""
    rows = mu.shape[0] if mu.ndim > 1 else 1
    log_var = mul(log_sigma, 2.0)
    inner = sub(sub(add(log_var, 1.0), square(mu)), exp(log_var))
    return mul(sum_(inner), -0.5 / rows)


def vae_loss(enc: LatentEncoder, x, beta: float, rng: np.random.Generator) -> Node:
    """Reconstruction error of a reparameterized sample plus ``beta`` times the KL term."""
    x = _rows(x)
    mu, log_sigma = enc.encoder_graph(x)
    if log_sigma is None:
        raise ValueError("vae_loss needs a beta_vae encoder")
    noise = constant(rng.standard_normal(mu.shape))
    z = add(mu, mul(exp(log_sigma), noise))
    rec = mean(square(sub(enc.decoder_graph(z), x)))
    return add(rec, mul(kl_divergence(mu, log_sigma), beta))


def train_encoder(enc: LatentEncoder, data, epochs: int | None = None) -> List[float]:
    """Fit the autoencoder with Adam at the configured rate; returns the mean loss per epoch."""
    cfg = enc.cfg
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected rows of length {cfg.input_dim}, got shape {x.shape}")
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamW(enc.params)
    history = []
    for epoch in range(epochs or cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            batch = x[order[start : start + cfg.batch_size]]
            if cfg.variant == BETA_VAE:
                loss = vae_loss(enc, batch, cfg.beta, rng)
            else:
                loss = ae_loss(enc, batch)
            enc.params.zero_grad()
            loss.backward()
            optimizer.step(cfg.lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        logger.debug("encoder epoch %d: loss %.6g", epoch, history[-1])
    enc.trained = True
    logger.info("trained %s encoder for %d epochs, final loss %.6g", cfg.variant, len(history), history[-1])
    return history


def dataset_rows(dataset: EnsembleSet) -> tuple:
    """Every timestep flattened, member by member, with its member's class label."""
    labels = dataset.class_labels()
    rows, row_labels = [], []
    for member, label in zip(dataset.members, labels):
        for grid in member.timesteps:
            rows.append(grid.values.reshape(-1))
            row_labels.append(label)
    return np.stack(rows), np.asarray(row_labels, dtype=int)


def embed_dataset(dataset: EnsembleSet, backend: str = "pca", encoder: LatentEncoder | None = None) -> Embedding2D:
    """Map every timestep to 2D, labeled by its member's distinct simulation parameters.

    The encoder backend projects latent codes wider than 2 down with PCA.
    """
    rows, labels = dataset_rows(dataset)
    if backend == "pca":
        return Embedding2D(pca_project(pca_fit(rows, 2), rows), labels)
    if backend != "encoder":
        raise ValueError(f"unknown embedding backend {backend!r}")
    if encoder is None or not encoder.trained:
        raise ValueError("the encoder backend needs a trained encoder")
    latent = encode(encoder, rows)
    if latent.shape[1] > 2:
        latent = pca_project(pca_fit(latent, 2), latent)
    elif latent.shape[1] == 1:
        latent = np.hstack([latent, np.zeros_like(latent)])
    return Embedding2D(latent, labels)
