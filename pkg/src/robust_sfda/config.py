"""Experiment configuration: one flat, fully serializable record.

Every field belongs to a group (data, model, source, attack, adapt, losses,
ablation, eval, output). The same field names are used by the YAML config
file and by the CLI flags, so each flag maps to exactly one field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .adapt import AdaptSettings, AvailabilityCase, TrainSchedule
from .attack import AttackConfig
from .data import FAMILIES, ShiftSpec
from .errors import ConfigError, ValidationError
from .losses import LossToggles, LossWeights
from .nncore import ACTIVATIONS

METRICS = ("cosine", "euclidean")


def _f(default, group: str, help: str = ""):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"group": group, "help": help})
    return field(default=default, metadata={"group": group, "help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = _f(0, "run", "root seed; every random stream is derived from it")
    case: str = _f("both", "run", "availability case: both | standard_source_only | robust_source_only")

    # synthetic data (ignored when both CSV paths are given)
    family: str = _f("gaussian_blobs", "data", "gaussian_blobs | two_arcs")
    classes: int = _f(4, "data")
    dim: int = _f(24, "data")
    samples_per_class: int = _f(200, "data")
    noise_sigma: float = _f(0.7, "data", "noise in the two strong coordinates")
    radius: float = _f(1.3, "data")
    weak_strength: float = _f(0.15, "data", "class offset in every further coordinate")
    weak_noise_sigma: float | None = _f(0.2, "data")
    rotation: float = _f(0.6, "data", "target pair rotation in radians")
    translation: float = _f(0.0, "data", "target translation")
    scale: float = _f(1.0, "data", "target scale")
    target_noise_sigma: float | None = _f(None, "data", "target strong-coordinate noise; defaults to noise_sigma")
    source_csv: str | None = _f(None, "data")
    target_csv: str | None = _f(None, "data")
    input_lo: float | None = _f(None, "data", "declared CSV input range; computed from the data when unset")
    input_hi: float | None = _f(None, "data")
    class_subset: int | None = _f(None, "data", "keep only the first k classes")
    train_fraction: float = _f(0.7, "data")
    val_fraction: float = _f(0.1, "data")
    test_fraction: float = _f(0.2, "data")

    hidden: list[int] = _f([64, 64], "model")
    bottleneck: int = _f(16, "model", "feature dimension d")
    activation: str = _f("relu", "model")

    source_epochs: int = _f(20, "source")
    source_lr_backbone: float = _f(1e-3, "source")
    source_lr_head: float = _f(1e-3, "source")
    batch_size: int = _f(64, "source")
    patience: int = _f(5, "source", "early-stopping patience, shared by all phases")

    epsilon: float = _f(0.2, "attack", "training attack radius in input units")
    attack_steps: int = _f(20, "attack")
    rel_step: float = _f(0.1, "attack", "step size as a fraction of epsilon")
    random_start: bool = _f(False, "attack")

    adapt_epochs: int = _f(10, "adapt")
    standard_lr_backbone: float = _f(1e-5, "adapt")
    standard_lr_head: float = _f(1e-3, "adapt")
    robust_lr_backbone: float = _f(3e-3, "adapt")
    robust_lr_head: float = _f(1e-3, "adapt")
    refresh_interval: int = _f(1, "adapt", "epochs between k-means pseudo-label refreshes")
    metric: str = _f("cosine", "adapt", "k-means distance: cosine | euclidean")
    max_pairs: int | None = _f(None, "adapt", "subsample contrastive pairs per batch")
    include_clean: bool = _f(False, "adapt", "robust phase also trains on the clean batch")

    alpha: float = _f(1.0, "losses")
    beta: float = _f(0.3, "losses")
    gamma: float = _f(0.2, "losses")
    margin: float = _f(1.0, "losses")

    contrastive: bool = _f(True, "ablation", "contrastive term in both target phases")
    pseudo_ce: bool = _f(True, "ablation", "pseudo-label cross-entropy in the robust phase")
    entropy: bool = _f(True, "ablation", "entropy term in both target phases")
    diversity: bool = _f(True, "ablation", "diversity term in both target phases")
    adv_images: bool = _f(True, "ablation", "robust phase trains on PGD examples")
    robust_pseudo_labels: bool = _f(False, "ablation", "robust phase labels from the robust model instead")

    eval_epsilon: float | None = _f(None, "eval", "defaults to epsilon")
    eval_steps: int = _f(20, "eval")
    eval_rel_step: float = _f(0.1, "eval")
    eval_random_start: bool = _f(False, "eval")
    baselines: bool = _f(True, "eval", "also adapt the SHOT and SHOT-robust analogs")

    output_dir: str | None = _f(None, "output")
    save_checkpoints: bool = _f(True, "output")

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        """Build and validate; unknown keys and bad values are all reported at once."""
        known = {f.name: f for f in fields(cls)}
        problems: list[tuple[str, str]] = []
        values: dict[str, Any] = {}
        for key, raw in data.items():
            if key not in known:
                problems.append((key, "unknown field"))
                continue
            try:
                values[key] = coerce(known[key].type, raw)
            except (TypeError, ValueError) as exc:
                problems.append((key, str(exc)))
        cfg = cls(**values)
        try:
            cfg.validate()
        except ValidationError as exc:
            problems += exc.problems
        if problems:
            raise ValidationError(problems)
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror or exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict({**data, **(overrides or {})})

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})

    # ------------------------------------------------------------------
    # validation

    def validate(self) -> None:
        p: list[tuple[str, str]] = []

        def need(cond: bool, name: str, msg: str):
            if not cond:
                p.append((name, msg))

        need(self.case in {c.value for c in AvailabilityCase}, "case", f"unknown case {self.case!r}")
        need(self.family in FAMILIES, "family", f"must be one of {FAMILIES}")
        need(self.classes >= 1, "classes", "must be >= 1")
        need(self.family != "two_arcs" or self.classes == 2, "classes", "two_arcs needs exactly 2 classes")
        need(self.dim >= 2, "dim", "must be >= 2")
        need(self.samples_per_class >= 1, "samples_per_class", "must be >= 1")
        for name in ("noise_sigma", "radius", "scale"):
            need(getattr(self, name) > 0, name, "must be > 0")
        for name in ("weak_noise_sigma", "target_noise_sigma"):
            v = getattr(self, name)
            need(v is None or v > 0, name, "must be > 0")
        need(self.weak_strength >= 0, "weak_strength", "must be >= 0")
        need((self.source_csv is None) == (self.target_csv is None), "target_csv", "give both CSV paths or neither")
        if (self.input_lo is None) != (self.input_hi is None):
            p.append(("input_hi", "give both input_lo and input_hi or neither"))
        elif self.input_lo is not None:
            need(self.input_lo < self.input_hi, "input_hi", "must exceed input_lo")
        if self.class_subset is not None:
            upper = self.classes if self.source_csv is None else None
            need(self.class_subset >= 1 and (upper is None or self.class_subset <= upper), "class_subset", "must lie in [1, classes]")
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        need(all(f >= 0 for f in fracs) and abs(sum(fracs) - 1) < 1e-9, "test_fraction", "split fractions must be >= 0 and sum to 1")
        need(self.train_fraction > 0, "train_fraction", "must be > 0")
        need(self.test_fraction > 0, "test_fraction", "must be > 0")
        need(all(h >= 1 for h in self.hidden), "hidden", "widths must be >= 1")
        need(self.bottleneck >= 1, "bottleneck", "must be >= 1")
        need(self.activation in ACTIVATIONS, "activation", f"must be one of {sorted(ACTIVATIONS)}")
        for name in ("source_epochs", "adapt_epochs"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        for name in ("batch_size", "patience", "refresh_interval", "attack_steps", "eval_steps"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(
            self.adapt_epochs == 0 or self.refresh_interval <= self.adapt_epochs,
            "refresh_interval",
            "cannot exceed adapt_epochs",
        )
        for name in (
            "source_lr_backbone",
            "source_lr_head",
            "standard_lr_backbone",
            "standard_lr_head",
            "robust_lr_backbone",
            "robust_lr_head",
        ):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(self.epsilon >= 0, "epsilon", "must be >= 0")
        need(self.eval_epsilon is None or self.eval_epsilon >= 0, "eval_epsilon", "must be >= 0")
        need(self.rel_step > 0, "rel_step", "must be > 0")
        need(self.eval_rel_step > 0, "eval_rel_step", "must be > 0")
        need(self.metric in METRICS, "metric", f"must be one of {METRICS}")
        need(self.max_pairs is None or self.max_pairs >= 1, "max_pairs", "must be >= 1")
        for name in ("alpha", "beta", "gamma"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(self.margin > 0, "margin", "must be > 0")
        if p:
            raise ValidationError(p)

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        lines = []
        group = None
        for f in fields(self):
            if f.metadata["group"] != group:
                group = f.metadata["group"]
                lines.append(f"\n# {group}")
            value = yaml.safe_dump(getattr(self, f.name), default_flow_style=True).strip()
            value = value.removesuffix("\n...").removesuffix("...").strip()
            note = f"  # {f.metadata['help']}" if f.metadata["help"] else ""
            lines.append(f"{f.name}: {value}{note}")
        return "\n".join(lines).lstrip() + "\n"

    def config_hash(self) -> str:
        """Hash of every field that can change results (output location excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "save_checkpoints")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def group_hash(self, *groups: str) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.metadata["group"] in groups}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    # ------------------------------------------------------------------
    # translation into library objects

    def source_spec(self) -> ShiftSpec:
        return ShiftSpec(
            family=self.family,
            classes=self.classes,
            dim=self.dim,
            samples_per_class=self.samples_per_class,
            noise_sigma=self.noise_sigma,
            radius=self.radius,
            weak_strength=self.weak_strength,
            weak_noise_sigma=self.weak_noise_sigma,
        )

    def target_spec(self) -> ShiftSpec:
        return replace(
            self.source_spec(),
            rotation=self.rotation,
            translation=self.translation,
            scale=self.scale,
            noise_sigma=self.target_noise_sigma or self.noise_sigma,
        )

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def train_attack(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.attack_steps, self.rel_step, self.random_start)

    def eval_attack(self) -> AttackConfig:
        eps = self.epsilon if self.eval_epsilon is None else self.eval_epsilon
        return AttackConfig(eps, self.eval_steps, self.eval_rel_step, self.eval_random_start)

    def source_schedule(self) -> TrainSchedule:
        return TrainSchedule(
            max_epochs=self.source_epochs,
            batch_size=self.batch_size,
            early_stop_patience=self.patience,
            lr_backbone=self.source_lr_backbone,
            lr_head=self.source_lr_head,
        )

    def _adapt_schedule(self, lr_backbone: float, lr_head: float) -> TrainSchedule:
        return TrainSchedule(
            max_epochs=self.adapt_epochs,
            pseudo_refresh_interval=self.refresh_interval,
            batch_size=self.batch_size,
            early_stop_patience=self.patience,
            lr_backbone=lr_backbone,
            lr_head=lr_head,
        )

    def adapt_settings(self) -> AdaptSettings:
        shared = dict(entropy=self.entropy, diversity=self.diversity, contrastive=self.contrastive)
        return AdaptSettings(
            standard_schedule=self._adapt_schedule(self.standard_lr_backbone, self.standard_lr_head),
            robust_schedule=self._adapt_schedule(self.robust_lr_backbone, self.robust_lr_head),
            weights=LossWeights(self.alpha, self.beta, self.gamma, self.margin),
            standard_toggles=LossToggles(pseudo_ce=True, **shared),
            robust_toggles=LossToggles(pseudo_ce=self.pseudo_ce, **shared),
            train_attack=self.train_attack(),
            metric=self.metric,
            adv_images=self.adv_images,
            include_clean=self.include_clean,
            robust_pseudo_labels=self.robust_pseudo_labels,
            max_pairs=self.max_pairs,
        )

    def baseline_settings(self) -> AdaptSettings:
        """The SHOT analog: the standard objective without the contrastive term."""
        no_con = LossToggles(contrastive=False)
        return replace(self.adapt_settings(), standard_toggles=no_con, robust_toggles=no_con)


# ----------------------------------------------------------------------
# value coercion shared by YAML and CLI input

_NONE_WORDS = {"none", "null", "~", ""}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _scalar(kind: str, raw):
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        if isinstance(raw, bool):
            raise ValueError(f"expected an integer, got {raw!r}")
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        try:
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if kind == "float":
        if isinstance(raw, bool):
            raise ValueError(f"expected a number, got {raw!r}")
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise ValueError(f"expected a number, got {raw!r}") from None
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        return value
    if kind == "str":
        if not isinstance(raw, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return raw
    raise TypeError(f"unsupported field type {kind}")


def coerce(annotation: str, raw):
    """Convert a YAML value or CLI string to the declared field type."""
    annotation = str(annotation).replace(" ", "")
    optional = annotation.endswith("|None")
    base = annotation.removesuffix("|None")
    if raw is None or (optional and isinstance(raw, str) and raw.strip().lower() in _NONE_WORDS):
        if optional:
            return None
        raise ValueError("may not be empty")
    if base.startswith("list["):
        inner = base[5:-1]
        items = raw.split(",") if isinstance(raw, str) else raw
        if not isinstance(items, (list, tuple)):
            raise ValueError(f"expected a list, got {raw!r}")
        return [_scalar(inner, item) for item in items if not (isinstance(item, str) and not item.strip())]
    return _scalar(base, raw)
