"""Synthetic domain-shift datasets, CSV I/O and stratified splitting."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .nncore import DTYPE, RngSeed

log = logging.getLogger(__name__)

FAMILIES = ("gaussian_blobs", "two_arcs")


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray
    domain_tag: str = "domain"
    input_range: tuple[float, float] = (0.0, 1.0)
    class_count: int = 2

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise SchemaError(f"x {self.x.shape} and y {self.y.shape} disagree")
        self.input_range = (float(self.input_range[0]), float(self.input_range[1]))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, index, tag: str | None = None) -> "DomainDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, x=self.x[index], y=self.y[index], domain_tag=tag or self.domain_tag)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)


@dataclass(frozen=True)
class ShiftSpec:
    """Class geometry and the affine shift applied to one domain.

    gaussian_blobs: class means sit on a circle of ``radius`` in the first two
    coordinates; every further coordinate carries a small class-dependent
    offset of +-``weak_strength`` with its own noise level
    ``weak_noise_sigma``. two_arcs: two interleaved half circles in
    the first two coordinates (C must be 2), same weak offsets elsewhere.
    The domain shift rotates each coordinate pair (0,1), (2,3), ... by
    ``rotation`` radians, then scales and translates.
    """

    family: str = "gaussian_blobs"
    classes: int = 4
    dim: int = 8
    samples_per_class: int = 150
    rotation: float = 0.0
    translation: float | tuple[float, ...] = 0.0
    scale: float = 1.0
    noise_sigma: float = 0.3
    radius: float = 2.0
    weak_strength: float = 0.0
    weak_noise_sigma: float | None = None  # defaults to noise_sigma

    def validate(self) -> None:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}")
        if self.classes < 1:
            problems.append("classes must be >= 1")
        if self.family == "two_arcs" and self.classes != 2:
            problems.append("two_arcs needs exactly 2 classes")
        if self.dim < 2:
            problems.append("dim must be >= 2")
        if self.samples_per_class < 1:
            problems.append("samples_per_class must be >= 1")
        nums = [self.rotation, self.scale, self.noise_sigma, self.radius, self.weak_strength, *np.atleast_1d(self.translation)]
        if not all(np.isfinite(nums)):
            problems.append("parameters must be finite")
        if self.weak_noise_sigma is not None and not self.weak_noise_sigma > 0:
            problems.append("weak_noise_sigma must be positive")
        if not self.scale > 0 or not self.noise_sigma > 0:
            problems.append("scale and noise_sigma must be positive")
        t = np.atleast_1d(self.translation)
        if t.size not in (1, self.dim):
            problems.append("translation must be a scalar or a dim-length vector")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["translation"], tuple):
            d["translation"] = list(d["translation"])
        return d


def _pair_rotation(dim: int, theta: float) -> np.ndarray:
    rot = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for i in range(0, dim - 1, 2):
        rot[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return rot


def _class_geometry(spec: ShiftSpec, geometry_rng: np.random.Generator) -> dict:
    return {"weak_signs": geometry_rng.choice([-1.0, 1.0], size=(spec.classes, spec.dim - 2))}


def _planar_points(spec: ShiftSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if spec.family == "gaussian_blobs":
        angles = 2 * np.pi * labels / spec.classes
        return spec.radius * np.column_stack([np.cos(angles), np.sin(angles)])
    # two_arcs: upper arc for class 0, lower shifted arc for class 1
    t = rng.uniform(0.0, np.pi, size=len(labels))
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    pts = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
    return spec.radius * pts


def _analytic_extent(spec: ShiftSpec, geom: dict) -> float:
    # largest |coordinate| any noiseless point can reach after the rotation
    planar = spec.radius * (1.5 if spec.family == "two_arcs" else 1.0)
    weak = spec.weak_strength if spec.dim > 2 else 0.0
    pair_extent = max(planar * np.sqrt(2.0), weak * np.sqrt(2.0))
    return spec.scale * pair_extent


def _sample_domain(spec: ShiftSpec, geom: dict, rng: np.random.Generator, tag: str) -> DomainDataset:
    spec.validate()
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    planar = _planar_points(spec, labels, rng)
    weak = spec.weak_strength * geom["weak_signs"][labels]
    clean = np.hstack([planar, weak])
    sigma = np.full(spec.dim, spec.noise_sigma)
    sigma[2:] = spec.weak_noise_sigma if spec.weak_noise_sigma is not None else spec.noise_sigma
    x = clean + sigma * rng.standard_normal(clean.shape)
    x = spec.scale * (x @ _pair_rotation(spec.dim, spec.rotation).T)
    x = x + np.broadcast_to(np.atleast_1d(np.asarray(spec.translation, dtype=DTYPE)), (spec.dim,))
    t = np.atleast_1d(np.asarray(spec.translation, dtype=DTYPE))
    pad = 4.0 * float(sigma.max()) * spec.scale
    extent = _analytic_extent(spec, geom)
    lo = float(np.min(t) - extent - pad)
    hi = float(np.max(t) + extent + pad)
    x = np.clip(x, lo, hi)
    return DomainDataset(x, labels, tag, (lo, hi), spec.classes)


def make_domain_pair(spec_source: ShiftSpec, spec_target: ShiftSpec, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Draw a source and a target domain sharing one class geometry."""
    spec_source.validate()
    spec_target.validate()
    if spec_source.classes != spec_target.classes or spec_source.dim != spec_target.dim:
        raise ConfigError("source and target specs must share classes and dim")
    if spec_source.family != spec_target.family:
        raise ConfigError("source and target specs must share the family")
    root = RngSeed(seed, "data")
    geom = _class_geometry(spec_source, root.child("geometry").generator())
    src = _sample_domain(spec_source, geom, root.child("source").generator(), "source")
    tgt = _sample_domain(spec_target, geom, root.child("target").generator(), "target")
    return src, tgt


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


class Splits(NamedTuple):
    train: DomainDataset
    val: DomainDataset
    test: DomainDataset

    @property
    def empty(self) -> list[str]:
        return [name for name, part in zip(self._fields, self) if len(part) == 0]


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions, dtype=float) * n
    sizes = np.floor(raw + 1e-9).astype(int)
    short = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in order[:short]:
        sizes[i] += 1
    return [int(s) for s in sizes]


def split(dataset: DomainDataset, fractions=(0.7, 0.1, 0.2), seed: int = 0, stream: str = "split") -> Splits:
    """Seeded, stratified train/val/test partition.

    ``stream`` names the random stream so that two datasets split under one
    seed (source and target) get independent partitions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = RngSeed(seed, stream).generator()
    n = len(dataset)
    # interleave classes so that every prefix is close to class-proportional
    rank_key = np.zeros(n)
    jitter = rng.random(n)
    for c in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == c)
        perm = rng.permutation(len(idx))
        rank_key[idx[perm]] = (np.arange(len(idx)) + 0.5) / len(idx)
    order = np.lexsort((jitter, rank_key))
    sizes = _split_sizes(n, fractions)
    cuts = np.cumsum([0] + sizes)
    parts = [np.sort(order[cuts[i] : cuts[i + 1]]) for i in range(3)]
    out = Splits(*(dataset.subset(p, f"{dataset.domain_tag}/{name}") for p, name in zip(parts, ("train", "val", "test"))))
    if out.empty:
        log.warning("split of %s produced empty partitions: %s", dataset.domain_tag, out.empty)
    return out


def class_subset(dataset: DomainDataset, k: int) -> DomainDataset:
    """Keep samples of the first ``k`` classes; labels and per-class counts unchanged."""
    if not 1 <= k <= dataset.class_count:
        raise ConfigError(f"k must lie in [1, {dataset.class_count}], got {k}")
    keep = np.flatnonzero(dataset.y < k)
    return replace(dataset.subset(keep), class_count=k)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass
class CsvSchema:
    classes: int | None = None
    input_range: tuple[float, float] | None = None
    domain_tag: str | None = None
    label_column: str = "label"


def export_csv(dataset: DomainDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, lab in zip(dataset.x, dataset.y):
            w.writerow([format(v, ".17g") for v in row] + [int(lab)])
    return path


def load_csv(path, schema: CsvSchema | None = None) -> DomainDataset:
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise ParseError(f"{path}: header lacks a {schema.label_column!r} column", line=1)
        li = header.index(schema.label_column)
        feature_cols = [i for i in range(len(header)) if i != li]
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}", line=lineno)
            feats = []
            for i in feature_cols:
                try:
                    v = float(row[i])
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: column {header[i]!r} is not numeric: {row[i]!r}", line=lineno, column=header[i]
                    ) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}:{lineno}: column {header[i]!r} is not finite", line=lineno, column=header[i])
                feats.append(v)
            try:
                lab_f = float(row[li])
            except ValueError:
                lab_f = float("nan")
            if not np.isfinite(lab_f) or lab_f != int(lab_f):
                raise ParseError(f"{path}:{lineno}: label {row[li]!r} is not an integer", line=lineno, column=schema.label_column)
            xs.append(feats)
            ys.append(int(lab_f))
    x = np.asarray(xs, dtype=DTYPE).reshape(len(xs), len(feature_cols))
    y = np.asarray(ys, dtype=np.int64)
    classes = schema.classes if schema.classes is not None else (int(y.max()) + 1 if len(y) else 0)
    if len(y) and (y.min() < 0 or y.max() >= classes):
        bad = int(np.flatnonzero((y < 0) | (y >= classes))[0])
        raise SchemaError(f"{path}:{bad + 2}: label {y[bad]} outside [0, {classes})")
    if schema.input_range is not None:
        lo, hi = schema.input_range
        if len(x) and (x.min() < lo or x.max() > hi):
            raise SchemaError(f"{path}: values fall outside the declared input range [{lo}, {hi}]")
    elif len(x):
        lo, hi = float(x.min()), float(x.max())
    else:
        lo, hi = 0.0, 1.0
    return DomainDataset(x, y, schema.domain_tag or path.stem, (lo, hi), classes)
