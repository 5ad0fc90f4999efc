"""Command line entry point.

Verbs: ``run``, ``ablate``, ``sweep-classes``, ``export-features``, ``gen-data``.
Experiment verbs accept ``--config FILE`` plus one ``--<field>`` flag per
ExperimentConfig field (underscores become dashes); flags override the file.
On success a JSON summary goes to stdout and the exit code is 0. On failure
a JSON error object goes to stderr and the exit code is 2 for bad input
(config, CLI usage, CSV/schema problems) or 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import bench
from .config import ExperimentConfig
from .data import CsvSchema, load_csv
from .errors import ConfigError, ParseError, RobustSFDAError, SchemaError
from .pseudo import PseudoLabelSet

INPUT_ERRORS = (ConfigError, ParseError, SchemaError)


class UsageError(ConfigError):
    kind = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if status:
            raise UsageError(message or f"{self.prog}: exited with status {status}")
        super().exit(status, message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config; flags override its fields")
    group = p.add_argument_group("experiment fields")
    for f in fields(ExperimentConfig):
        helptext = f"{f.metadata['help']} " if f.metadata["help"] else ""
        group.add_argument(_flag(f.name), dest=f"cfg__{f.name}", default=argparse.SUPPRESS, metavar=str(f.type).replace(" ", ""), help=f"{helptext}[{f.metadata['group']}]")


def _config_from(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__")}
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-sfda", description="Source-free robust domain adaptation laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train sources, adapt, evaluate and write a report")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _add_config_flags(p)
    p.add_argument("--rows", type=lambda s: [r for r in s.split(",") if r], default=None, help=f"subset of {','.join(bench.ABLATIONS)}")

    p = sub.add_parser("sweep-classes", help="both vs standard-source-only over class counts")
    _add_config_flags(p)
    p.add_argument("--ks", type=_int_list, required=True, help="class counts, e.g. 2,4,6,8,10")
    p.add_argument("--seeds", type=_int_list, default=None, help="seeds to average over (default: the config seed)")

    p = sub.add_parser("gen-data", help="write the configured domains and splits as CSV")
    _add_config_flags(p)

    p = sub.add_parser("export-features", help="dump encoder features of a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV with f0..f{D-1},label")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--attacked", action="store_true", help="features of PGD examples instead of clean inputs")
    p.add_argument("--pseudo", help="pseudo-label CSV (sample_id,label,source,epoch); default: model predictions")
    p.add_argument("--epsilon", type=float, default=None, help="override the checkpoint's eval epsilon")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_pseudo(path: str) -> PseudoLabelSet:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        rows.sort(key=lambda r: int(r["sample_id"]))
        return PseudoLabelSet([int(r["label"]) for r in rows], rows[0]["source"] if rows else "kmeans", int(rows[0]["epoch"]) if rows else 0)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: malformed pseudo-label dump ({exc})") from None


def _run(args) -> dict:
    cfg = _config_from(args)
    out = bench.resolve_output_dir(cfg, "run")
    rep = bench.run_experiment(cfg, out)
    final = rep.record("robust_track")
    return {"output_dir": str(out), "config_hash": rep.config_hash, "clean_accuracy": final["clean_accuracy"], "adv_accuracy": final["adv_accuracy"]}


def _ablate(args) -> dict:
    cfg = _config_from(args)
    out = bench.resolve_output_dir(cfg, "ablate")
    table = bench.run_ablation_grid(cfg, out, rows=args.rows)
    return {"output_dir": str(out), "rows": table.table()}


def _sweep(args) -> dict:
    cfg = _config_from(args)
    out = bench.resolve_output_dir(cfg, "sweep")
    sweep = bench.run_class_sweep(cfg, args.ks, args.seeds, out)
    return {"output_dir": str(out), "rows": sweep.rows, "rank_correlation": sweep.rank_correlation}


def _gen_data(args) -> dict:
    cfg = _config_from(args)
    out = bench.resolve_output_dir(cfg, "data")
    files = bench.generate_data(cfg, out)
    return {"output_dir": str(out), "files": {k: str(v) for k, v in files.items()}}


def _export(args) -> dict:
    model, meta = bench.load_checkpoint(args.checkpoint)
    rng = meta.get("target_input_range")
    data = load_csv(args.data, CsvSchema(classes=model.num_classes))
    if rng is not None:
        data.input_range = (min(rng[0], data.input_range[0]), max(rng[1], data.input_range[1]))
    atk = None
    if args.attacked:
        if "eval_attack" not in meta and args.epsilon is None:
            raise ConfigError("checkpoint records no attack profile; pass --epsilon")
        from .attack import AttackConfig

        profile = dict(meta.get("eval_attack") or {"epsilon": args.epsilon})
        profile.pop("step_size", None)
        atk = AttackConfig(**profile)
        if args.epsilon is not None:
            atk = atk.with_epsilon(args.epsilon)
    pseudo = _load_pseudo(args.pseudo) if args.pseudo else None
    path = bench.export_features(model, data, args.attacked, args.out, pseudo, atk, args.seed)
    return {"output": str(path), "rows": len(data), "columns": model.encoder.feature_dim + 3}


VERBS = {"run": _run, "ablate": _ablate, "sweep-classes": _sweep, "gen-data": _gen_data, "export-features": _export}


def _fail(payload: dict, code: int) -> int:
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except RobustSFDAError as exc:
        return _fail(exc.to_dict(), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = VERBS[args.verb](args)
    except INPUT_ERRORS as exc:
        return _fail(exc.to_dict(), 2)
    except RobustSFDAError as exc:
        return _fail(exc.to_dict(), 1)
    except OSError as exc:
        return _fail({"error": "io_error", "message": str(exc), "path": getattr(exc, "filename", None)}, 1)
    sys.stdout.write(json.dumps(summary, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
