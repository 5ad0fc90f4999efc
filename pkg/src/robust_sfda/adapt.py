"""Source training (standard and adversarial) and the two target adaptation tracks.

Target-phase functions take only target arrays and source *models*; no source
dataset handle ever reaches them.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import nncore as nn
from .attack import AttackConfig, adv_accuracy, clean_accuracy, pgd_attack
from .data import DomainDataset
from .errors import ConfigError
from .losses import LossToggles, LossWeights, cross_entropy, robust_target_loss, target_loss
from .pseudo import LabelSource, PseudoLabelSet, kmeans_from_model, model_pseudo_labels, pseudo_label_accuracy

log = logging.getLogger(__name__)


class AvailabilityCase(str, Enum):
    ROBUST_SOURCE_ONLY = "robust_source_only"
    STANDARD_SOURCE_ONLY = "standard_source_only"
    BOTH = "both"


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 10
    pseudo_refresh_interval: int = 1
    batch_size: int = 64
    early_stop_patience: int = 5
    lr_backbone: float = 1e-5
    lr_head: float = 1e-3

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.pseudo_refresh_interval < 1:
            raise ConfigError("batch_size, early_stop_patience and pseudo_refresh_interval must be positive")
        if self.max_epochs and self.pseudo_refresh_interval > self.max_epochs:
            raise ConfigError("pseudo_refresh_interval cannot exceed max_epochs")
        if self.lr_backbone < 0 or self.lr_head < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class TrainResult:
    model: nn.Model
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float | None = None
    pseudo: PseudoLabelSet | None = None
    pseudo_accuracy: list[dict] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # near-equal chunks so no trailing batch of one sample
    perm = rng.permutation(n)
    k = max(1, int(np.ceil(n / batch_size)))
    return [b for b in np.array_split(perm, k) if len(b)]


def _fit(
    model: nn.Model,
    schedule: TrainSchedule,
    n: int,
    rng: np.random.Generator,
    step: Callable[[np.ndarray], dict],
    validate: Callable[[nn.Model], float] | None,
    on_epoch_start: Callable[[int], None] | None = None,
) -> tuple[list[dict], int, float | None]:
    """Mini-batch loop with early stopping; leaves the best-validated weights in ``model``.

    Ties in the validation metric keep the later epoch but do not reset patience.
    """
    opt_history: list[dict] = []
    best_metric = validate(model) if validate else None
    best_state, best_epoch, stale = model.state_dict(), 0, 0
    for epoch in range(schedule.max_epochs):
        if on_epoch_start:
            on_epoch_start(epoch)
        sums: dict[str, float] = {}
        batches = _batches(n, schedule.batch_size, rng)
        for idx in batches:
            for k, v in step(idx).items():
                sums[k] = sums.get(k, 0.0) + v
        rec = {"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()}}
        if validate:
            metric = validate(model)
            rec["val_metric"] = metric
            if metric >= best_metric:
                stale = 0 if metric > best_metric else stale + 1
                best_metric, best_state, best_epoch = metric, model.state_dict(), epoch + 1
            else:
                stale += 1
        else:
            best_state, best_epoch = model.state_dict(), epoch + 1
        opt_history.append(rec)
        if validate and stale >= schedule.early_stop_patience:
            break
    model.load_state_dict(best_state)
    return opt_history, best_epoch, best_metric


def _require(x, what: str):
    if x is None or len(x) == 0:
        raise ConfigError(f"{what} is empty")
    return x


# ---------------------------------------------------------------------------
# Source phase
# ---------------------------------------------------------------------------


def train_source_standard(
    init: nn.Model,
    train: DomainDataset,
    val: DomainDataset | None,
    schedule: TrainSchedule,
    seed: int = 0,
) -> TrainResult:
    """Mini-batch Adam on cross-entropy; selection on validation clean accuracy."""
    _require(train, "source train split")
    model = init.clone()
    opt = nn.adam_for(model, schedule.lr_backbone, schedule.lr_head)
    rng = nn.RngSeed(seed, "source/shuffle").generator()

    def step(idx):
        opt.zero_grad()
        loss = cross_entropy(model(train.x[idx]).logits, train.y[idx])
        value = loss.item()
        loss.backward()
        opt.step()
        return {"ce": value}

    validate = (lambda m: clean_accuracy(m, val.x, val.y)) if val is not None and len(val) else None
    hist, best_epoch, best = _fit(model, schedule, len(train), rng, step, validate)
    return TrainResult(model, hist, best_epoch, best)


def train_source_robust(
    init: nn.Model,
    train: DomainDataset,
    val: DomainDataset | None,
    schedule: TrainSchedule,
    atk: AttackConfig,
    seed: int = 0,
    val_atk: AttackConfig | None = None,
) -> TrainResult:
    """Adversarial training: each batch is replaced by its PGD examples against the current model."""
    _require(train, "source train split")
    model = init.clone()
    opt = nn.adam_for(model, schedule.lr_backbone, schedule.lr_head)
    rng = nn.RngSeed(seed, "source/shuffle").generator()
    atk_rng = nn.RngSeed(seed, "source/attack").generator()
    atk = atk.with_range(*train.input_range)
    val_atk = (val_atk or atk).with_range(*train.input_range)

    def step(idx):
        x_adv = pgd_attack(model, train.x[idx], train.y[idx], atk, atk_rng)
        opt.zero_grad()
        loss = cross_entropy(model(x_adv).logits, train.y[idx])
        value = loss.item()
        loss.backward()
        opt.step()
        return {"ce": value}

    validate = None
    if val is not None and len(val):
        val_rng = nn.RngSeed(seed, "source/val-attack")
        validate = lambda m: adv_accuracy(m, val.x, val.y, val_atk, val_rng.generator())  # noqa: E731
    hist, best_epoch, best = _fit(model, schedule, len(train), rng, step, validate)
    return TrainResult(model, hist, best_epoch, best)


# ---------------------------------------------------------------------------
# Target phase
# ---------------------------------------------------------------------------


@dataclass
class TargetData:
    """Unlabeled target training inputs plus optional labeled validation for model selection.

    ``train_truth`` is used only to log pseudo-label accuracy, never for training.
    """

    x_train: np.ndarray
    input_range: tuple[float, float]
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None
    train_truth: np.ndarray | None = None

    @classmethod
    def from_splits(cls, train: DomainDataset, val: DomainDataset | None = None) -> "TargetData":
        has_val = val is not None and len(val) > 0
        return cls(
            train.x,
            train.input_range,
            val.x if has_val else None,
            val.y if has_val else None,
            train.y,
        )

    @property
    def has_val(self) -> bool:
        return self.x_val is not None and len(self.x_val) > 0


@dataclass(frozen=True)
class AdaptSettings:
    standard_schedule: TrainSchedule = TrainSchedule()
    robust_schedule: TrainSchedule = TrainSchedule()
    weights: LossWeights = LossWeights()
    standard_toggles: LossToggles = LossToggles()
    robust_toggles: LossToggles = LossToggles()
    train_attack: AttackConfig = AttackConfig(epsilon=4 / 255)
    val_attack: AttackConfig | None = None
    metric: str = "cosine"
    adv_images: bool = True
    include_clean: bool = False
    robust_pseudo_labels: bool = False
    max_pairs: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_attack"] = self.train_attack.to_dict()
        d["val_attack"] = self.val_attack.to_dict() if self.val_attack else None
        return d


def adapt_target_standard(
    f_s: nn.Model,
    target: TargetData,
    schedule: TrainSchedule,
    w: LossWeights,
    toggles: LossToggles = LossToggles(),
    seed: int = 0,
    metric: str = "cosine",
    max_pairs: int | None = None,
    stream: str = "target/standard",
) -> TrainResult:
    """Adapt the encoder with the entropy/diversity/pseudo/contrastive objective.

    The classifier is frozen. k-means pseudo-labels over the whole target
    train split are recomputed at the start of every epoch whose index is a
    multiple of the refresh interval.
    """
    if f_s is None:
        raise ConfigError("standard adaptation needs a source model")
    x = _require(target.x_train, "target train split")
    model = f_s.clone()
    model.classifier.freeze()
    opt = nn.adam_for(model, schedule.lr_backbone, schedule.lr_head)
    rng = nn.RngSeed(seed, f"{stream}/shuffle").generator()
    pair_rng = nn.RngSeed(seed, f"{stream}/pairs").generator() if max_pairs else None
    needs_labels = toggles.pseudo_ce or toggles.contrastive
    state: dict = {"pseudo": None}
    pl_log: list[dict] = []

    def refresh(epoch):
        if needs_labels and epoch % schedule.pseudo_refresh_interval == 0:
            state["pseudo"] = kmeans_from_model(model, x, metric, epoch)
            if target.train_truth is not None:
                pl_log.append({"epoch": epoch, "accuracy": pseudo_label_accuracy(state["pseudo"], target.train_truth)})

    def step(idx):
        opt.zero_grad()
        out = model(x[idx])
        labels = state["pseudo"].take(idx) if state["pseudo"] is not None else None
        br = target_loss(out.logits, out.features, labels, w, toggles, max_pairs, pair_rng)
        if br.total.requires_grad:
            br.total.backward()
            opt.step()
        return br.as_dict()

    validate = (lambda m: clean_accuracy(m, target.x_val, target.y_val)) if target.has_val else None
    hist, best_epoch, best = _fit(model, schedule, len(x), rng, step, validate, refresh)
    return TrainResult(model, hist, best_epoch, best, state["pseudo"], pl_log)


def adapt_target_robust(
    init_model: nn.Model,
    label_model: nn.Model,
    target: TargetData,
    schedule: TrainSchedule,
    w: LossWeights,
    atk: AttackConfig,
    toggles: LossToggles = LossToggles(),
    seed: int = 0,
    label_source: LabelSource = LabelSource.STANDARD_MODEL,
    adv_images: bool = True,
    include_clean: bool = False,
    val_atk: AttackConfig | None = None,
    max_pairs: int | None = None,
    stream: str = "target/robust",
) -> TrainResult:
    """Adversarial target adaptation with fixed model pseudo-labels.

    Pseudo-labels come from ``label_model`` once, before the epoch loop. Each
    batch is attacked with PGD against the current robust model using those
    labels, and the adaptation objective is evaluated on the adversarial
    outputs. With ``adv_images=False`` the clean batch is used instead.
    """
    if init_model is None or label_model is None:
        raise ConfigError("robust adaptation needs an initial model and a pseudo-label model")
    x = _require(target.x_train, "target train split")
    pseudo = model_pseudo_labels(label_model, x, label_source)
    pl_log = []
    if target.train_truth is not None:
        pl_log.append({"epoch": 0, "accuracy": pseudo_label_accuracy(pseudo, target.train_truth)})
    model = init_model.clone()
    model.classifier.freeze()
    opt = nn.adam_for(model, schedule.lr_backbone, schedule.lr_head)
    rng = nn.RngSeed(seed, f"{stream}/shuffle").generator()
    atk_rng = nn.RngSeed(seed, f"{stream}/attack").generator()
    pair_rng = nn.RngSeed(seed, f"{stream}/pairs").generator() if max_pairs else None
    atk = atk.with_range(*target.input_range)
    val_atk = (val_atk or atk).with_range(*target.input_range)

    def step(idx):
        xb, yb = x[idx], pseudo.take(idx)
        xa = pgd_attack(model, xb, yb, atk, atk_rng) if adv_images else xb
        if include_clean:
            xa, yb = np.vstack([xa, xb]), np.concatenate([yb, yb])
        opt.zero_grad()
        out = model(xa)
        br = robust_target_loss(out.logits, out.features, yb, w, toggles, max_pairs=max_pairs, rng=pair_rng)
        if br.total.requires_grad:
            br.total.backward()
            opt.step()
        return br.as_dict()

    validate = None
    if target.has_val:
        val_rng = nn.RngSeed(seed, f"{stream}/val-attack")
        validate = lambda m: adv_accuracy(m, target.x_val, target.y_val, val_atk, val_rng.generator())  # noqa: E731
    hist, best_epoch, best = _fit(model, schedule, len(x), rng, step, validate)
    return TrainResult(model, hist, best_epoch, best, pseudo, pl_log)


# ---------------------------------------------------------------------------
# Availability cases
# ---------------------------------------------------------------------------


@dataclass
class CaseResult:
    case: AvailabilityCase
    standard_track: TrainResult
    robust_track: TrainResult
    label_track: TrainResult | None = None  # model that produced robust-phase pseudo-labels, when distinct

    @property
    def final_model(self) -> nn.Model:
        """Only the robust target model is used for inference."""
        return self.robust_track.model

    @property
    def models(self) -> dict[str, nn.Model]:
        return {"f_t": self.standard_track.model, "f_t_r": self.robust_track.model}


def adapt_standard_with(settings: AdaptSettings, f: nn.Model, target: TargetData, seed: int, stream: str) -> TrainResult:
    return adapt_target_standard(
        f,
        target,
        settings.standard_schedule,
        settings.weights,
        settings.standard_toggles,
        seed,
        settings.metric,
        settings.max_pairs,
        stream,
    )


def adapt_robust_with(
    settings: AdaptSettings,
    init: nn.Model,
    label_model: nn.Model,
    target: TargetData,
    seed: int,
    label_source: LabelSource,
    stream: str = "target/robust",
) -> TrainResult:
    return adapt_target_robust(
        init,
        label_model,
        target,
        settings.robust_schedule,
        settings.weights,
        settings.train_attack,
        settings.robust_toggles,
        seed,
        label_source,
        settings.adv_images,
        settings.include_clean,
        settings.val_attack,
        settings.max_pairs,
        stream,
    )


def run_case(
    case: AvailabilityCase | str,
    target: TargetData,
    settings: AdaptSettings,
    f_s: nn.Model | None = None,
    f_s_r: nn.Model | None = None,
    seed: int = 0,
    cache: dict | None = None,
) -> CaseResult:
    """Run one availability case end to end on the target.

    both: standard track from f_s; robust track initialised from f_s_r with
    the standard track's pseudo-labels (or, with ``robust_pseudo_labels``,
    those of f_s_r adapted by the standard objective).
    standard_source_only: robust track initialised from the adapted f_s.
    robust_source_only: standard track adapted from f_s_r; robust track from
    f_s_r with that track's (robust) pseudo-labels.

    ``cache`` may hold already-adapted standard tracks keyed by name so that
    several cases sharing a seed do not recompute them.
    """
    case = AvailabilityCase(case)
    cache = {} if cache is None else cache

    def std_track(name: str, model: nn.Model) -> TrainResult:
        if name not in cache:
            cache[name] = adapt_standard_with(settings, model, target, seed, f"target/standard/{name}")
        return cache[name]

    if case is AvailabilityCase.BOTH:
        if f_s is None or f_s_r is None:
            raise ConfigError("case 'both' needs the standard and the robust source model")
        standard = std_track("from_standard", f_s)
        if settings.robust_pseudo_labels:
            labeller, source = std_track("from_robust", f_s_r), LabelSource.ROBUST_MODEL
        else:
            labeller, source = standard, LabelSource.STANDARD_MODEL
        robust = adapt_robust_with(settings, f_s_r, labeller.model, target, seed, source)
        return CaseResult(case, standard, robust, labeller)
    if case is AvailabilityCase.STANDARD_SOURCE_ONLY:
        if f_s is None:
            raise ConfigError("case 'standard_source_only' needs the standard source model")
        standard = std_track("from_standard", f_s)
        robust = adapt_robust_with(settings, standard.model, standard.model, target, seed, LabelSource.STANDARD_MODEL)
        return CaseResult(case, standard, robust, standard)
    if f_s_r is None:
        raise ConfigError("case 'robust_source_only' needs the robust source model")
    standard = std_track("from_robust", f_s_r)
    robust = adapt_robust_with(settings, f_s_r, standard.model, target, seed, LabelSource.ROBUST_MODEL)
    return CaseResult(case, standard, robust, standard)
