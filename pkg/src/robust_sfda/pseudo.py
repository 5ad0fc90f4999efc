"""Pseudo-label producers: two-step weighted k-means and model argmax."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import nncore as nn
from .errors import DegenerateError, DimensionError

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class LabelSource(str, Enum):
    KMEANS = "kmeans"
    STANDARD_MODEL = "standard_model"
    ROBUST_MODEL = "robust_model"


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    source: LabelSource
    epoch_stamp: int = 0
    empty_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.source = LabelSource(self.source)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> np.ndarray:
        return self.labels[np.asarray(index, dtype=np.int64)]


@dataclass
class CentroidSet:
    centers: np.ndarray
    distance_metric: str = "cosine"
    active: np.ndarray | None = None  # boolean mask of non-empty classes


def _prepare(features: np.ndarray, metric: str) -> np.ndarray:
    f = np.asarray(features, dtype=nn.DTYPE)
    if metric == "cosine":
        f = np.hstack([f, np.ones((len(f), 1))])
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
    elif metric != "euclidean":
        raise ValueError(f"unknown distance metric {metric!r}")
    return f


def _distances(f: np.ndarray, centers: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(centers, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        return 1.0 - (f @ centers.T) / safe[None, :]
    diff = f[:, None, :] - centers[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _assign(f: np.ndarray, cents: CentroidSet) -> tuple[np.ndarray, np.ndarray]:
    active = np.flatnonzero(cents.active)
    if active.size == 0:
        raise DegenerateError("every class centroid is empty")
    d = _distances(f, cents.centers[active], cents.distance_metric)
    # distances within TIE_TOL of the minimum count as ties; lowest class index wins
    pick = np.argmax(d <= d.min(axis=1, keepdims=True) + TIE_TOL, axis=1)
    return active[pick], d[np.arange(len(f)), pick]


def weighted_centroids(f: np.ndarray, weights: np.ndarray, metric: str) -> CentroidSet:
    mass = weights.sum(axis=0)
    active = mass > 0
    centers = np.zeros((weights.shape[1], f.shape[1]))
    centers[active] = (weights.T @ f)[active] / mass[active, None]
    return CentroidSet(centers, metric, active)


def kmeans_pseudo_labels(
    features: np.ndarray,
    probs: np.ndarray,
    metric: str = "cosine",
    epoch: int = 0,
    return_details: bool = False,
):
    """Two-step weighted k-means over features.

    Step one places class centroids at the probability-weighted feature means
    and assigns every sample to its nearest centroid. Step two recomputes each
    centroid as the plain mean of its assignees and reassigns once more.
    Classes without mass (or without assignees) are skipped and logged.
    """
    features = np.asarray(features, dtype=nn.DTYPE)
    probs = np.asarray(probs, dtype=nn.DTYPE)
    if features.ndim != 2 or probs.ndim != 2 or len(features) != len(probs):
        raise DimensionError(f"features {features.shape} and probs {probs.shape} must share the sample axis")
    classes = probs.shape[1]
    f = _prepare(features, metric)

    step1 = weighted_centroids(f, probs, metric)
    labels1, _ = _assign(f, step1)
    onehot = np.eye(classes)[labels1]
    step2 = weighted_centroids(f, onehot, metric)
    labels2, _ = _assign(f, step2)

    empty = sorted(set(np.flatnonzero(~step1.active)) | set(np.flatnonzero(~step2.active)))
    if empty:
        log.info("k-means pseudo-labels: empty clusters excluded %s", empty)
    out = PseudoLabelSet(labels2, LabelSource.KMEANS, epoch, [int(c) for c in empty])
    if return_details:
        return out, {"step1_labels": labels1, "step1_centroids": step1, "step2_centroids": step2}
    return out


def mean_assigned_distance(features, labels, cents: CentroidSet) -> float:
    f = _prepare(features, cents.distance_metric)
    d = _distances(f, cents.centers, cents.distance_metric)
    return float(d[np.arange(len(f)), np.asarray(labels)].mean())


def kmeans_from_model(model: nn.Model, x: np.ndarray, metric: str = "cosine", epoch: int = 0) -> PseudoLabelSet:
    logits = model.predict_logits(x)
    return kmeans_pseudo_labels(model.features(x), nn.softmax_np(logits), metric, epoch)


def model_pseudo_labels(model: nn.Model, x: np.ndarray, source=LabelSource.STANDARD_MODEL, epoch: int = 0) -> PseudoLabelSet:
    """Argmax labels of ``model``; exact ties go to the lowest class index."""
    return PseudoLabelSet(np.argmax(model.predict_logits(x), axis=1), source, epoch)


def pseudo_label_accuracy(pseudo, truth) -> float:
    labels = np.asarray(getattr(pseudo, "labels", pseudo))
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise DimensionError(f"pseudo-labels {labels.shape} and truth {truth.shape} differ in length")
    if len(truth) == 0:
        return float("nan")
    return float(np.mean(labels == truth))


def dump_csv(pseudo: PseudoLabelSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "source", "epoch"])
        for i, lab in enumerate(pseudo.labels):
            w.writerow([i, int(lab), pseudo.source.value, pseudo.epoch_stamp])
    return path
