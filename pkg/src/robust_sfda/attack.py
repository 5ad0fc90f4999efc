"""l-infinity PGD (FGSM as its one-step case) and adversarial accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nncore as nn
from .errors import ConfigError, DomainError, NumericError
from .losses import cross_entropy


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 20
    rel_step: float = 0.1
    random_start: bool = False
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    step_size_abs: float | None = None  # overrides rel_step * epsilon when set

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError("epsilon must be finite and >= 0")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if self.step_size_abs is None:
            if not self.rel_step > 0:
                raise ConfigError("rel_step must be > 0")
        elif not self.step_size_abs > 0:
            raise ConfigError("step_size must be > 0")
        if not self.clamp_lo < self.clamp_hi:
            raise ConfigError("clamp_lo must be below clamp_hi")

    @property
    def step_size(self) -> float:
        return self.step_size_abs if self.step_size_abs is not None else self.rel_step * self.epsilon

    def with_range(self, lo: float, hi: float) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), "clamp_lo": float(lo), "clamp_hi": float(hi)})

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), "epsilon": float(epsilon)})

    def to_dict(self) -> dict:
        return {**asdict(self), "step_size": self.step_size}


def input_gradient(model: nn.Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the input batch."""
    xt = nn.Tensor(x, requires_grad=True)
    with nn.detached(model):
        loss = cross_entropy(model(xt).logits, labels)
        (g,) = nn.gradients(loss, [xt])
    return g


def pgd_attack(
    model: nn.Model,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sign-gradient ascent on cross-entropy, projected onto the eps-ball and clamp range."""
    x = np.asarray(x, dtype=nn.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.epsilon == 0:
        return x.copy()
    eps = cfg.epsilon
    lo, hi = x - eps, x + eps
    x_adv = x.copy()
    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start needs an rng")
        x_adv = np.clip(x_adv + rng.uniform(-eps, eps, size=x.shape), cfg.clamp_lo, cfg.clamp_hi)
    for _ in range(int(cfg.steps)):
        g = input_gradient(model, x_adv, labels)
        bad = ~np.all(np.isfinite(g), axis=1)
        if bad.any():
            raise NumericError(f"non-finite input gradient at batch index {int(np.flatnonzero(bad)[0])}")
        x_adv = x_adv + cfg.step_size * np.sign(g)
        x_adv = np.minimum(np.maximum(x_adv, lo), hi)
        x_adv = np.clip(x_adv, cfg.clamp_lo, cfg.clamp_hi)
    return x_adv


def attack_in_chunks(model, x, labels, cfg: AttackConfig, rng=None, chunk: int = 1024) -> np.ndarray:
    # per-sample trajectories are independent, so chunking does not change results
    parts = [pgd_attack(model, x[i : i + chunk], labels[i : i + chunk], cfg, rng) for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if parts else np.asarray(x, dtype=nn.DTYPE).copy()


def adv_predictions(model: nn.Model, x, labels, cfg: AttackConfig, rng=None) -> np.ndarray:
    x = np.asarray(x, dtype=nn.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    return model.predict(attack_in_chunks(model, x, labels, cfg, rng))


def adv_accuracy(model: nn.Model, x, labels, cfg: AttackConfig, rng=None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.mean(adv_predictions(model, x, labels, cfg, rng) == labels))


def clean_accuracy(model: nn.Model, x, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(x) == labels))
