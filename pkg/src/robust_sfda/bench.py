"""Experiment runners: one method comparison, the ablation grid, the class-count sweep.

Every run writes into its own directory:

* ``report.json``: the versioned run report (config echo, metrics, curves)
* ``metrics.csv``: tidy rows ``model,split,attack_profile,metric,value``
* ``manifest.json``: config, config hash, seed and code version
* ``checkpoints/<model>.json``: parameter dumps (optional)

Wall-clock timings are kept apart from the metrics so that two runs of one
config produce byte-identical metric sections.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from . import nncore as nn
from .adapt import (
    AvailabilityCase,
    TargetData,
    TrainResult,
    adapt_standard_with,
    run_case,
    train_source_robust,
    train_source_standard,
)
from .attack import AttackConfig, attack_in_chunks
from .config import ExperimentConfig
from .data import CsvSchema, DomainDataset, Splits, class_subset, export_csv, load_csv, make_domain_pair, split
from .errors import ConfigError, DomainError, SchemaError
from .pseudo import PseudoLabelSet

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
OUTPUT_ROOT_ENV = "ROBUST_SFDA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
CHECKPOINT_FORMAT = "robust-sfda-checkpoint/1"

TARGET_TEST = "target/test"
SOURCE_TEST = "source/test"


def code_version() -> str:
    """Package version plus a content hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def resolve_output_dir(cfg: ExperimentConfig, kind: str = "run") -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / f"{kind}-{cfg.config_hash()[:12]}"


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class ExperimentData:
    source: Splits
    target: Splits

    @property
    def classes(self) -> int:
        return self.source.train.class_count

    @property
    def dim(self) -> int:
        return self.source.train.dim


def load_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    """Source and target datasets before any class subsetting or splitting."""
    if cfg.source_csv is not None:
        declared = (cfg.input_lo, cfg.input_hi) if cfg.input_lo is not None else None
        src = load_csv(cfg.source_csv, CsvSchema(input_range=declared, domain_tag="source"))
        tgt = load_csv(cfg.target_csv, CsvSchema(input_range=declared, domain_tag="target"))
        if src.dim != tgt.dim:
            raise SchemaError(f"source has {src.dim} feature columns, target has {tgt.dim}")
        classes = max(src.class_count, tgt.class_count)
        src.class_count = tgt.class_count = classes
        return src, tgt
    return make_domain_pair(cfg.source_spec(), cfg.target_spec(), cfg.seed)


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    src, tgt = load_domains(cfg)
    if cfg.class_subset is not None:
        src, tgt = class_subset(src, cfg.class_subset), class_subset(tgt, cfg.class_subset)
    return ExperimentData(
        split(src, cfg.fractions, cfg.seed, stream="split/source"),
        split(tgt, cfg.fractions, cfg.seed, stream="split/target"),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _per_class(pred: np.ndarray, y: np.ndarray, classes: int) -> list[float | None]:
    out: list[float | None] = []
    for c in range(classes):
        mask = y == c
        out.append(float(np.mean(pred[mask] == c)) if mask.any() else None)
    return out


def _macro(per_class: list[float | None]) -> float:
    vals = [v for v in per_class if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(model: nn.Model, data: DomainDataset, atk: AttackConfig, rng_seed: nn.RngSeed) -> dict:
    """Clean and adversarial accuracy (micro, macro and per class) of one model on one split."""
    if len(data) == 0:
        raise DomainError(f"cannot evaluate on the empty split {data.domain_tag}")
    atk = atk.with_range(*data.input_range)
    clean_pred = model.predict(data.x)
    x_adv = attack_in_chunks(model, data.x, data.y, atk, rng_seed.generator())
    adv_pred = model.predict(x_adv)
    per_clean = _per_class(clean_pred, data.y, data.class_count)
    per_adv = _per_class(adv_pred, data.y, data.class_count)
    return {
        "split": data.domain_tag,
        "attack_profile": "eval",
        "clean_accuracy": float(np.mean(clean_pred == data.y)),
        "adv_accuracy": float(np.mean(adv_pred == data.y)),
        "clean_macro_accuracy": _macro(per_clean),
        "adv_macro_accuracy": _macro(per_adv),
        "clean_per_class": per_clean,
        "adv_per_class": per_adv,
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    config_hash: str
    code_version: str
    metrics: dict[str, dict]  # "<model>@<split>" -> evaluate() record
    pseudo_label_accuracy: dict[str, list[dict]]
    curves: dict[str, list[dict]]
    best_epochs: dict[str, int]
    attack_profiles: dict[str, dict]
    timing: dict[str, float] = field(default_factory=dict)
    schema_version: str = REPORT_SCHEMA_VERSION
    output_dir: str | None = None

    def record(self, model: str, split_name: str = TARGET_TEST) -> dict:
        try:
            return self.metrics[f"{model}@{split_name}"]
        except KeyError:
            raise KeyError(f"no metrics for model {model!r} on {split_name!r}") from None

    def adv(self, model: str = "robust_track", split_name: str = TARGET_TEST) -> float:
        return self.record(model, split_name)["adv_accuracy"]

    def clean(self, model: str = "robust_track", split_name: str = TARGET_TEST) -> float:
        return self.record(model, split_name)["clean_accuracy"]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "attack_profiles": self.attack_profiles,
            "metrics": self.metrics,
            "pseudo_label_accuracy": self.pseudo_label_accuracy,
            "best_epochs": self.best_epochs,
            "curves": self.curves,
            "timing": self.timing,
        }

    def metrics_json(self) -> str:
        """Canonical text of the deterministic part of the report."""
        d = self.to_dict()
        d.pop("timing")
        return json.dumps(d, sort_keys=True)

    def metric_rows(self) -> list[dict]:
        rows = []
        for key, rec in self.metrics.items():
            model = key.split("@", 1)[0]
            base = {"model": model, "split": rec["split"]}
            for metric in ("clean_accuracy", "clean_macro_accuracy"):
                rows.append({**base, "attack_profile": "none", "metric": metric, "value": rec[metric]})
            for metric in ("adv_accuracy", "adv_macro_accuracy"):
                rows.append({**base, "attack_profile": rec["attack_profile"], "metric": metric, "value": rec[metric]})
            for c, v in enumerate(rec["clean_per_class"]):
                rows.append({**base, "attack_profile": "none", "metric": f"clean_accuracy_class_{c}", "value": v})
            for c, v in enumerate(rec["adv_per_class"]):
                rows.append({**base, "attack_profile": rec["attack_profile"], "metric": f"adv_accuracy_class_{c}", "value": v})
        return rows

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_rows(out / "metrics.csv", ["model", "split", "attack_profile", "metric", "value"], self.metric_rows())
        manifest = {
            "schema_version": self.schema_version,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.config["seed"],
            "code_version": self.code_version,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.output_dir = str(out)
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])
    return path


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: nn.Model, path, config_hash: str, meta: dict | None = None) -> Path:
    """Self-describing JSON dump; float64 values survive the text round trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "widths": model.encoder.widths,
        "activation": model.encoder.activation,
        "classes": model.num_classes,
        "meta": meta or {},
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()} for name, arr in model.state_dict().items()},
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[nn.Model, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a JSON checkpoint ({exc.msg})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    model = nn.Model.init(doc["widths"], doc["classes"], doc["activation"])
    state = {k: np.asarray(v["data"], dtype=nn.DTYPE).reshape(v["shape"]) for k, v in doc["params"].items()}
    model.load_state_dict(state)
    return model, {"config_hash": doc["config_hash"], **doc["meta"]}


# ---------------------------------------------------------------------------
# Single experiment
# ---------------------------------------------------------------------------


@dataclass
class SourceModels:
    standard: TrainResult | None
    robust: TrainResult | None


def _needs(cfg: ExperimentConfig) -> tuple[bool, bool]:
    case = AvailabilityCase(cfg.case)
    std = cfg.baselines or case is not AvailabilityCase.ROBUST_SOURCE_ONLY
    rob = cfg.baselines or case is not AvailabilityCase.STANDARD_SOURCE_ONLY
    return std, rob


def train_sources(cfg: ExperimentConfig, data: ExperimentData, cache: dict | None = None) -> SourceModels:
    """Train the source models the config needs; ``cache`` shares them across runs."""
    need_std, need_rob = _needs(cfg)
    key = cfg.group_hash("run", "data", "model", "source", "attack").encode()
    cache = {} if cache is None else cache
    init = nn.Model.init([data.dim, *cfg.hidden, cfg.bottleneck], data.classes, cfg.activation, cfg.seed)
    schedule = cfg.source_schedule()
    std = rob = None
    if need_std:
        k = (key, "standard")
        if k not in cache:
            cache[k] = train_source_standard(init, data.source.train, data.source.val, schedule, cfg.seed)
        std = cache[k]
    if need_rob:
        k = (key, "robust")
        if k not in cache:
            cache[k] = train_source_robust(init, data.source.train, data.source.val, schedule, cfg.train_attack(), cfg.seed)
        rob = cache[k]
    return SourceModels(std, rob)


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True, cache: dict | None = None) -> RunReport:
    """Source training, target adaptation for the configured case, evaluation, persistence."""
    cfg.validate()
    t0 = time.perf_counter()
    data = prepare_data(cfg)
    sources = train_sources(cfg, data, cache)
    t_source = time.perf_counter()

    target = TargetData.from_splits(data.target.train, data.target.val)
    settings = cfg.adapt_settings()
    f_s = sources.standard.model if sources.standard else None
    f_s_r = sources.robust.model if sources.robust else None
    result = run_case(cfg.case, target, settings, f_s, f_s_r, cfg.seed)

    tracks: dict[str, TrainResult] = {"standard_track": result.standard_track, "robust_track": result.robust_track}
    if result.label_track is not None and result.label_track is not result.standard_track:
        tracks["label_track"] = result.label_track
    if cfg.baselines:
        base = cfg.baseline_settings()
        tracks["shot"] = adapt_standard_with(base, f_s, target, cfg.seed, "target/baseline/shot")
        tracks["shot_robust"] = adapt_standard_with(base, f_s_r, target, cfg.seed, "target/baseline/shot-robust")
    t_adapt = time.perf_counter()

    eval_atk = cfg.eval_attack()
    metrics: dict[str, dict] = {}

    def score(name: str, model: nn.Model, ds: DomainDataset):
        metrics[f"{name}@{ds.domain_tag}"] = evaluate(model, ds, eval_atk, nn.RngSeed(cfg.seed, f"eval/{name}/{ds.domain_tag}"))

    for name, src in (("source_standard", sources.standard), ("source_robust", sources.robust)):
        if src is not None:
            score(name, src.model, data.source.test)
            score(name, src.model, data.target.test)
    for name, tr in tracks.items():
        if name != "label_track":
            score(name, tr.model, data.target.test)
    t_eval = time.perf_counter()

    all_tracks = {**({"source_standard": sources.standard} if sources.standard else {}), **({"source_robust": sources.robust} if sources.robust else {}), **tracks}
    report = RunReport(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        code_version=code_version(),
        metrics=metrics,
        pseudo_label_accuracy={k: tr.pseudo_accuracy for k, tr in tracks.items()},
        curves={k: tr.history for k, tr in all_tracks.items()},
        best_epochs={k: tr.best_epoch for k, tr in all_tracks.items()},
        attack_profiles={"train": cfg.train_attack().to_dict(), "eval": eval_atk.to_dict()},
        timing={
            "source_s": t_source - t0,
            "adapt_s": t_adapt - t_source,
            "eval_s": t_eval - t_adapt,
            "wall_clock_s": t_eval - t0,
        },
    )
    if write:
        out = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
        report.write(out)
        if cfg.save_checkpoints:
            meta_base = {"seed": cfg.seed, "case": cfg.case, "eval_attack": eval_atk.to_dict(), "target_input_range": list(data.target.test.input_range)}
            for name, tr in all_tracks.items():
                save_checkpoint(tr.model, out / "checkpoints" / f"{name}.json", report.config_hash, {**meta_base, "role": name})
    return report


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_contrastive": {"contrastive": False},
    "no_pseudo_ce": {"pseudo_ce": False},  # removed from the robust phase only
    "no_entropy": {"entropy": False},
    "no_diversity": {"diversity": False},
    "no_adv_images": {"adv_images": False},
}


@dataclass
class AblationTable:
    rows: dict[str, RunReport]

    def table(self) -> list[dict]:
        out = []
        for name, rep in self.rows.items():
            rec = rep.record("robust_track")
            out.append(
                {
                    "row": name,
                    "clean_accuracy": rec["clean_accuracy"],
                    "adv_accuracy": rec["adv_accuracy"],
                    "clean_macro_accuracy": rec["clean_macro_accuracy"],
                    "adv_macro_accuracy": rec["adv_macro_accuracy"],
                }
            )
        return out


def run_ablation_grid(
    base: ExperimentConfig,
    out_dir=None,
    rows: Sequence[str] | None = None,
    write: bool = True,
    cache: dict | None = None,
) -> AblationTable:
    """One run per ablation row; the ``full`` row is exactly ``run_experiment(base)``."""
    rows = list(ABLATIONS) if rows is None else list(rows)
    unknown = [r for r in rows if r not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {list(ABLATIONS)}")
    cache = {} if cache is None else cache
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(base, "ablate")
    reports = {}
    for name in rows:
        changes = ABLATIONS[name]
        cfg = base if not changes else base.with_overrides(baselines=False, **changes)
        reports[name] = run_experiment(cfg, out / name, write=write, cache=cache)
    table = AblationTable(reports)
    if write:
        _write_rows(out / "ablation.csv", ["row", "clean_accuracy", "adv_accuracy", "clean_macro_accuracy", "adv_macro_accuracy"], table.table())
    return table


# ---------------------------------------------------------------------------
# Class-count sweep
# ---------------------------------------------------------------------------


@dataclass
class ClassSweep:
    rows: list[dict]
    rank_correlation: float

    @property
    def advantages(self) -> list[float]:
        return [r["advantage"] for r in self.rows]


def run_class_sweep(
    base: ExperimentConfig,
    ks: Sequence[int],
    seeds: Sequence[int] | None = None,
    out_dir=None,
    write: bool = True,
) -> ClassSweep:
    """Both-case vs standard-source-only adversarial accuracy on the first k classes.

    For each k and seed this is a pair of ``run_experiment`` calls on
    class-subset data. ``advantage`` is the seed-mean of (both - standard
    source only); ``relative`` is the ratio of the seed means, the series a
    relative-performance plot shows. The rank correlation is Spearman's rho
    between k and the advantage.
    """
    ks = [int(k) for k in ks]
    seeds = [base.seed] if seeds is None else [int(s) for s in seeds]
    if not ks:
        raise ConfigError("the sweep needs at least one class count")
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(base, "sweep")
    rows = []
    for k in ks:
        both, std, both_clean, std_clean = [], [], [], []
        for seed in seeds:
            cache: dict = {}
            cfg = base.with_overrides(class_subset=k, seed=seed, baselines=False)
            for case, acc, clean in (("both", both, both_clean), ("standard_source_only", std, std_clean)):
                c = cfg.with_overrides(case=case)
                rep = run_experiment(c, out / f"k{k}" / f"seed{seed}" / case, write=write, cache=cache)
                acc.append(rep.adv())
                clean.append(rep.clean())
        b, s = float(np.mean(both)), float(np.mean(std))
        rows.append(
            {
                "k": k,
                "both_adv": b,
                "standard_source_adv": s,
                "advantage": float(np.mean(np.subtract(both, std))),
                "relative": b / s if s > 0 else None,
                "both_clean": float(np.mean(both_clean)),
                "standard_source_clean": float(np.mean(std_clean)),
                "seeds": len(seeds),
            }
        )
    adv = [r["advantage"] for r in rows]
    rho = float(spearmanr(ks, adv)[0]) if len(ks) > 1 and np.ptp(adv) > 0 else float("nan")
    sweep = ClassSweep(rows, rho)
    if write:
        header = ["k", "both_adv", "standard_source_adv", "advantage", "relative", "both_clean", "standard_source_clean", "seeds"]
        _write_rows(out / "sweep.csv", header, rows)
        (out / "sweep.json").write_text(json.dumps({"rows": rows, "rank_correlation": rho}, indent=2) + "\n", encoding="utf-8")
    return sweep


# ---------------------------------------------------------------------------
# Feature export
# ---------------------------------------------------------------------------


def export_features(
    model: nn.Model,
    dataset: DomainDataset,
    attacked: bool,
    path,
    pseudo: PseudoLabelSet | np.ndarray | None = None,
    atk: AttackConfig | None = None,
    seed: int = 0,
) -> Path:
    """Write one row per sample: features z0..z{d-1}, label, pseudo_label, correct.

    ``pseudo_label`` is the given pseudo-label set, or the model's prediction
    when none is given; ``correct`` flags pseudo_label == label. With
    ``attacked`` the features are those of PGD examples built against the true
    labels.
    """
    if dataset.dim != model.input_dim:
        raise ConfigError(f"model expects {model.input_dim} inputs, dataset has {dataset.dim}")
    x = dataset.x
    if attacked:
        if atk is None:
            raise ConfigError("attacked export needs an attack config")
        x = attack_in_chunks(model, x, dataset.y, atk.with_range(*dataset.input_range), nn.RngSeed(seed, "export/attack").generator())
    feats = model.features(x)
    if pseudo is None:
        labels = model.predict(x)
    else:
        labels = np.asarray(getattr(pseudo, "labels", pseudo), dtype=np.int64)
        if len(labels) != len(dataset):
            raise ConfigError(f"{len(labels)} pseudo-labels for {len(dataset)} samples")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(feats.shape[1])] + ["label", "pseudo_label", "correct"])
            for f, y, p in zip(feats, dataset.y, labels):
                w.writerow([format(v, ".17g") for v in f] + [int(y), int(p), int(y == p)])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write features to {path}: {exc.strerror}") from None
    return path


def generate_data(cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    """Write the configured source/target domains and their splits as CSV."""
    src, tgt = load_domains(cfg)
    data = prepare_data(cfg)
    out = Path(out_dir)
    files = {"source": export_csv(src, out / "source.csv"), "target": export_csv(tgt, out / "target.csv")}
    for dom, splits in (("source", data.source), ("target", data.target)):
        for name, part in zip(splits._fields, splits):
            files[f"{dom}_{name}"] = export_csv(part, out / f"{dom}_{name}.csv")
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "input_range": {"source": list(src.input_range), "target": list(tgt.input_range)},
        "classes": src.class_count,
    }
    (out / "data.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return files
