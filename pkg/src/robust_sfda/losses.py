"""Scalar objectives for source training and target adaptation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import ConfigError, CoverageError, DimensionError, LabelError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # diversity
    beta: float = 0.3  # pseudo-label cross-entropy
    gamma: float = 0.2  # contrastive
    margin: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.margin > 0:
            raise ConfigError("contrastive margin must be positive")


@dataclass(frozen=True)
class LossToggles:
    """Which terms of the adaptation objective are active."""

    entropy: bool = True
    diversity: bool = True
    pseudo_ce: bool = True
    contrastive: bool = True


@dataclass
class LossBreakdown:
    total: nn.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), **self.components}


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise LabelError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")
    return labels


def cross_entropy(logits: nn.Tensor, labels) -> nn.Tensor:
    logits = nn.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -nn.pick(nn.log_softmax(logits), labels).mean()


def entropy_loss(logits: nn.Tensor) -> nn.Tensor:
    logits = nn.as_tensor(logits)
    logp = nn.log_softmax(logits)
    p = nn.softmax(logits)
    return -(p * logp).sum(axis=1).mean()


def diversity_loss(logits: nn.Tensor) -> nn.Tensor:
    """sum_c q_c log q_c where q is the batch-mean prediction; minimal for uniform q."""
    logits = nn.as_tensor(logits)
    if logits.shape[0] < 1:
        raise DimensionError("diversity loss needs a non-empty batch")
    q = nn.softmax(logits).mean(axis=0)
    return (q * nn.log(nn.clamp_min(q, PROB_FLOOR))).sum()


def pseudo_labels_for_batch(pseudo, index=None, batch: int | None = None) -> np.ndarray:
    """Resolve the pseudo-labels of a mini-batch, raising if any are missing."""
    labels = np.asarray(getattr(pseudo, "labels", pseudo))
    if index is not None:
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= len(labels)):
            raise CoverageError("pseudo-label set does not cover the batch indices")
        labels = labels[index]
    if batch is not None and len(labels) != batch:
        raise CoverageError(f"pseudo-label set covers {len(labels)} samples, batch has {batch}")
    if labels.size and labels.min() < 0:
        raise CoverageError("pseudo-label missing for some samples")
    return labels.astype(np.int64)


def pseudo_ce(logits: nn.Tensor, pseudo, index=None) -> nn.Tensor:
    logits = nn.as_tensor(logits)
    return cross_entropy(logits, pseudo_labels_for_batch(pseudo, index, logits.shape[0]))


def contrastive_loss(
    features: nn.Tensor,
    labels,
    margin: float = 1.0,
    max_pairs: int | None = None,
    rng: np.random.Generator | None = None,
) -> nn.Tensor:
    """Mean pairwise margin loss over the unordered pairs of the batch.

    Same-label pairs pay half their squared distance; different-label pairs pay
    half the squared shortfall below ``margin``.
    """
    features = nn.as_tensor(features)
    n = features.shape[0]
    labels = np.asarray(getattr(labels, "labels", labels))
    if len(labels) != n:
        raise CoverageError(f"{len(labels)} labels for {n} features")
    if n < 2:
        return nn.Tensor(0.0)
    iu, ju = np.triu_indices(n, k=1)
    if max_pairs is not None and max_pairs < len(iu):
        if rng is None:
            raise ConfigError("pair subsampling needs an rng")
        keep = np.sort(rng.choice(len(iu), size=max_pairs, replace=False))
        iu, ju = iu[keep], ju[keep]
    pair_mask = np.zeros((n, n))
    pair_mask[iu, ju] = 1.0
    same = (labels[:, None] == labels[None, :]).astype(float) * pair_mask
    diff = pair_mask - same
    d2 = nn.pairwise_sqdist(features)
    dist = nn.sqrt(d2)
    shortfall = nn.relu(margin - dist)
    per_pair = nn.mul(d2, same) + nn.mul(nn.square(shortfall), diff)
    return per_pair.sum() * (0.5 / len(iu))


def target_loss(
    logits: nn.Tensor,
    features: nn.Tensor,
    pseudo_labels,
    w: LossWeights,
    toggles: LossToggles = LossToggles(),
    max_pairs: int | None = None,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Entropy + alpha*diversity + beta*pseudo CE + gamma*contrastive.

    ``pseudo_labels`` may be None, in which case the two label-driven terms are
    skipped. Components are reported unweighted.
    """
    parts: list[nn.Tensor] = []
    comps: dict[str, float] = {}
    if toggles.entropy:
        ent = entropy_loss(logits)
        parts.append(ent)
        comps["ent"] = ent.item()
    if toggles.diversity:
        div = diversity_loss(logits)
        parts.append(div * w.alpha)
        comps["div"] = div.item()
    if pseudo_labels is not None:
        if toggles.pseudo_ce:
            pce = pseudo_ce(logits, pseudo_labels)
            parts.append(pce * w.beta)
            comps["pseudo"] = pce.item()
        if toggles.contrastive:
            con = contrastive_loss(features, pseudo_labels, w.margin, max_pairs, rng)
            parts.append(con * w.gamma)
            comps["con"] = con.item()
    if not parts:
        return LossBreakdown(nn.Tensor(0.0), comps)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossBreakdown(total, comps)


def robust_target_loss(adv_logits, adv_features, pseudo_labels, w: LossWeights, toggles: LossToggles = LossToggles(), **kw):
    """Same objective as :func:`target_loss`, evaluated on adversarial-example outputs."""
    return target_loss(adv_logits, adv_features, pseudo_labels, w, toggles, **kw)


def combine_components(components: dict[str, float], w: LossWeights) -> float:
    weights = {"ent": 1.0, "div": w.alpha, "pseudo": w.beta, "con": w.gamma}
    return sum(weights[k] * v for k, v in components.items())
