"""Evaluation: PSNR and EPE for fields, projection-quality metrics for labeled 2D embeddings, Pareto selection.

Unlabeled embedding points carry label -1; they stay in the embedding but are excluded from every projection metric.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.metrics import silhouette_samples

from flint_tsr.fieldio import FlowGrid, Grid

logger = logging.getLogger(__name__)

UNLABELED = -1
NEIGHBORS = 17
METRICS = ("neighborhood_hit", "silhouette", "separability", "spread")


def _values(field_) -> np.ndarray:
    if isinstance(field_, Grid):
        return field_.values
    if isinstance(field_, FlowGrid):
        return field_.components
    return np.asarray(field_, dtype=np.float64)


def psnr(gt, pred) -> float:
    """Peak signal-to-noise ratio in dB for unit-normalized fields; ``math.inf`` when they are identical."""
    a, b = _values(gt), _values(pred)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0) - 10.0 * math.log10(mse)


def epe(gt, pred) -> float:
    """Mean per-cell Euclidean distance between two flows stored ``(rank, *dims)``."""
    a, b = _values(gt), _values(pred)
    if a.shape != b.shape:
        raise ValueError(f"epe: shapes {a.shape} and {b.shape} differ")
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=0))))


def linear_baseline(d_s, d_u, tau: float) -> Grid:
    """Frame-linear interpolation ``(1 - tau) * D_s + tau * D_u``."""
    return Grid((1.0 - tau) * _values(d_s) + tau * _values(d_u))


def zero_flow_epe(gt) -> float:
    """EPE of predicting no motion at all."""
    a = _values(gt)
    return epe(a, np.zeros_like(a))


def cosine_similarity(gt, pred, min_magnitude: float = 0.0) -> float:
    """Mean cosine similarity of flow vectors over cells where the ground truth exceeds ``min_magnitude``."""
    a, b = _values(gt), _values(pred)
    na, nb = np.sqrt(np.sum(a * a, axis=0)), np.sqrt(np.sum(b * b, axis=0))
    keep = (na > min_magnitude) & (na > 0.0)
    if not np.any(keep):
        raise ValueError("no cells with ground-truth flow above the threshold")
    cos = np.sum(a * b, axis=0)[keep] / (na[keep] * np.where(nb[keep] > 0.0, nb[keep], 1.0))
    return float(np.mean(np.where(nb[keep] > 0.0, cos, 0.0)))


@dataclass
class Embedding2D:
    """2D points with an optional class per point (-1 when unlabeled)."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        """Coerce to arrays and default to all unlabeled."""
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.labels is None:
            self.labels = np.full(len(self.points), UNLABELED, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError(f"{self.labels.shape[0]} labels for {self.points.shape[0]} points")

    def labeled(self) -> tuple:
        """Points and labels of the labeled subset."""
        keep = self.labels != UNLABELED
        return self.points[keep], self.labels[keep]

    def with_labels(self, labels: np.ndarray) -> "Embedding2D":
        """Same points, other labels."""
        return Embedding2D(self.points, labels)


def neighborhood_hit(emb: Embedding2D, k: int = NEIGHBORS) -> float:
    """Mean fraction of each labeled point's k nearest labeled neighbours that share its class.

    Distances tie-break by point index.
    """
    pts, labels = emb.labeled()
    if len(pts) < k + 1:
        raise ValueError(f"neighborhood hit with k={k} needs at least {k + 1} labeled points, got {len(pts)}")
    dist = cdist(pts, pts)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nearest] == labels[:, np.newaxis]))


def silhouette(emb: Embedding2D) -> float:
    """Mean silhouette coefficient over labeled points; points of singleton classes score 0."""
    pts, labels = emb.labeled()
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"silhouette needs at least 2 classes, got {len(classes)}")
    if len(classes) == len(pts):
        return 0.0
    return float(np.mean(silhouette_samples(pts, labels, metric="euclidean")))


def centroids(pts: np.ndarray, labels: np.ndarray) -> tuple:
    """Class ids and the centroid of each class."""
    classes = np.unique(labels)
    return classes, np.stack([pts[labels == c].mean(axis=0) for c in classes])


def separability(emb: Embedding2D) -> float:
    """Mean pairwise centroid distance over the mean distance of points to their own centroid.

    Zero when the centroids coincide; infinite when the classes are separated points with no spread.
    """
    pts, labels = emb.labeled()
    classes, cents = centroids(pts, labels)
    if len(classes) < 2:
        raise ValueError(f"separability needs at least 2 classes, got {len(classes)}")
    between = float(np.mean(pdist(cents)))
    own = cents[np.searchsorted(classes, labels)]
    within = float(np.mean(np.linalg.norm(pts - own, axis=1)))
    if between == 0.0:
        return 0.0
    if within == 0.0:
        return math.inf
    return between / within


def spread(emb: Embedding2D) -> float:
    """Mean per-axis standard deviation after min-max normalizing the labeled points to the unit square."""
    pts, _ = emb.labeled()
    if len(pts) == 0:
        raise ValueError("spread needs at least one labeled point")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return float(np.mean(((pts - lo) / span).std(axis=0)))


def projection_metrics(emb: Embedding2D, k: int = NEIGHBORS) -> Dict[str, float | None]:
    """All four projection metrics; a metric the labeled subset cannot support is None."""
    functions = {
        "neighborhood_hit": lambda e: neighborhood_hit(e, k),
        "silhouette": silhouette,
        "separability": separability,
        "spread": spread,
    }
    out = {}
    for name, fn in functions.items():
        try:
            out[name] = fn(emb)
        except ValueError as exc:
            logger.warning("%s absent: %s", name, exc)
            out[name] = None
    return out


def _dominated(points: np.ndarray) -> np.ndarray:
    ge = np.all(points[:, np.newaxis, :] >= points[np.newaxis, :, :], axis=2)
    gt = np.any(points[:, np.newaxis, :] > points[np.newaxis, :, :], axis=2)
    # row j dominates column i
    return np.any(ge & gt, axis=0)


def pareto_frontier(records) -> List[int]:
    """Indices of the candidates no other candidate dominates (all objectives higher is better)."""
    points = np.asarray(records, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected one row of objectives per candidate, got shape {points.shape}")
    if len(points) == 0:
        return []
    return [int(i) for i in np.flatnonzero(~_dominated(points))]


def pareto_fronts(records) -> List[List[int]]:
    """Non-dominated sorting: the frontier, then the frontier of what remains, and so on."""
    points = np.asarray(records, dtype=np.float64)
    remaining = np.arange(len(points))
    fronts = []
    while remaining.size:
        keep = ~_dominated(points[remaining])
        fronts.append([int(i) for i in remaining[keep]])
        remaining = remaining[~keep]
    return fronts


class StabilityResult(NamedTuple):
    """Replicate statistics of one metric at one label fraction; mean and sd are None when absent."""

    fraction: float
    metric: str
    mean: float | None
    sd: float | None
    runs: int


def subset_stability(emb: Embedding2D, fractions: Sequence[float], n_runs: int = 20, seed: int = 0,
                     k: int = NEIGHBORS) -> List[StabilityResult]:
    """Score the projection metrics on random labeled subsets.

    For each fraction, ``n_runs`` times keep the labels of a uniform sample of that fraction of the labeled points
    and drop the rest, then score. Runs use independent generators spawned from the seed. A metric that no run of a
    fraction could score is reported absent.
    """
    labeled = np.flatnonzero(emb.labels != UNLABELED)
    results = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {fraction}")
        n_keep = int(round(fraction * len(labeled)))
        scores: Dict[str, list] = {name: [] for name in METRICS}
        for stream in np.random.SeedSequence(seed).spawn(n_runs):
            if n_keep == 0:
                continue
            keep = np.random.default_rng(stream).choice(labeled, size=n_keep, replace=False)
            labels = np.full_like(emb.labels, UNLABELED)
            labels[keep] = emb.labels[keep]
            subset = emb.with_labels(labels)
            for name, value in projection_metrics(subset, k).items():
                if value is not None and math.isfinite(value):
                    scores[name].append(value)
        for name in METRICS:
            values = scores[name]
            if values:
                mean, sd = float(np.mean(values)), float(np.std(values))
                results.append(StabilityResult(fraction, name, mean, sd, len(values)))
            else:
                results.append(StabilityResult(fraction, name, None, None, 0))
    return results


@dataclass
class MetricRecord:
    """Replicate statistics per metric for one model."""

    model_id: str
    values: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, metric: str, value: float) -> None:
        """Append one replicate."""
        self.values.setdefault(metric, []).append(float(value))

    def summary(self, metric: str) -> tuple:
        """``(mean, sd, replicates)`` of a metric."""
        reps = self.values[metric]
        if not reps:
            raise ValueError(f"{self.model_id}: no replicates for {metric}")
        return float(np.mean(reps)), float(np.std(reps)), len(reps)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_metric_records(records: Sequence[MetricRecord], path: str | Path) -> None:
    """Write ``model,metric,mean,sd,replicates`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["model", "metric", "mean", "sd", "replicates"])
        for record in records:
            for metric in record.values:
                mean, sd, n = record.summary(metric)
                writer.writerow([record.model_id, metric, _fmt(mean), _fmt(sd), n])


def read_metric_table(path: str | Path, objectives: Sequence[str]) -> tuple:
    """Read ``model,<objective>...`` rows; returns model ids and the objective matrix."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    missing = [name for name in ["model", *objectives] if rows and name not in rows[0]]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    matrix = np.array([[float(r[o]) for o in objectives] for r in rows]).reshape(-1, len(objectives))
    return [r["model"] for r in rows], matrix


def write_stability(results: Sequence[StabilityResult], path: str | Path) -> None:
    """Write ``fraction,metric,mean,sd,runs`` rows; absent metrics leave mean and sd empty."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["fraction", "metric", "mean", "sd", "runs"])
        for r in results:
            writer.writerow([repr(float(r.fraction)), r.metric, _fmt(r.mean), _fmt(r.sd), r.runs])


def write_embedding(emb: Embedding2D, path: str | Path) -> None:
    """Write ``x,y,label`` rows with an empty label for unlabeled points."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(emb.points, emb.labels):
            writer.writerow([repr(float(x)), repr(float(y)), "" if label == UNLABELED else int(label)])


def read_embedding(path: str | Path) -> Embedding2D:
    """Read an embedding CSV."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    points = [(float(r["x"]), float(r["y"])) for r in rows]
    labels = [int(r["label"]) if r["label"].strip() else UNLABELED for r in rows]
    return Embedding2D(np.array(points).reshape(-1, 2), np.array(labels, dtype=int))
