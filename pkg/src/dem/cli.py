"""Command-line entry point: ``dem gen | pretrain | adapt | ablate | report``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .da_losses import LossWeights
from .errors import DataError, DEMError, InvalidConfig, IoFailure
from .evolution import (
    LoopConfig,
    SPLIT_KEYS,
    apply_splits,
    dump_json,
    finish_run,
    initialize_state,
    pretrain_source_led,
    split_domains,
)
from .metrics import SUITES, ablation_rows, emit_report, run_ablation, run_rows
from .nn_core import load_checkpoint, save_checkpoint
from .synth_domains import ShiftSpec, generate_domain_pair, read_csv, write_csv

SECTIONS = {"LoopConfig": LoopConfig, "LossWeights": LossWeights, "ShiftSpec": ShiftSpec}
BENCHMARK = {"rotation_angle": float(np.pi / 2), "label_flip_rate": 0.1}
SEED_ENV = "DEM_SEED"


# -- config files --------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IoFailure(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: expected a JSON object")
    return doc


def _build(cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidConfig(f"{cls.__name__}: {exc}") from exc


def parse_config(doc: dict) -> dict:
    """Map a config document to ``{section: instance}``.

    The document has one object per section, named after the dataclass
    (``LoopConfig``, ``LossWeights``, ``ShiftSpec``), whose keys are that
    class's field names.  Missing sections take their defaults.
    """
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise InvalidConfig(f"section {name} must be an object")
        if cls is ShiftSpec and name not in doc:
            values = BENCHMARK
        out[name] = _build(cls, values)
    return out


def load_config(path=None) -> dict:
    cfg = parse_config({} if path is None else _read_json(path))
    return apply_seed_override(cfg)


def apply_seed_override(cfg: dict) -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    cfg = dict(cfg)
    cfg["LoopConfig"] = dataclasses.replace(cfg["LoopConfig"], seed=seed)
    return cfg


def config_document(cfg: dict) -> dict:
    return {name: (obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj))
            for name, obj in cfg.items()}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_dataset(path):
    try:
        return read_csv(path)
    except FileNotFoundError as exc:
        raise IoFailure(f"{path}: no such file") from exc


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> None:
    doc = _read_json(args.spec)
    spec = _build(ShiftSpec, doc["ShiftSpec"] if "ShiftSpec" in doc else doc)
    raw = os.environ.get(SEED_ENV)
    if raw:
        spec = dataclasses.replace(spec, seed=int(raw))
    source, target = generate_domain_pair(spec)
    for ds, path in ((source, args.out_source), (target, args.out_target)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_csv(ds, path)


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    config, weights = cfg["LoopConfig"], cfg["LossWeights"]
    source, target = _read_dataset(args.source), _read_dataset(args.target)
    if source.labels is None:
        raise DataError("the source file must carry labels")
    splits = split_domains(source, target, config)
    sets = apply_splits(source, target, splits)
    column, labels, _, history = pretrain_source_led(sets["source_train"], sets["source_val"],
                                                     sets["target_train"], config, weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "source_column.ckpt", column, rng_state={"seed": config.seed})
    dump_json(config_document(cfg), out / "config.json")
    dump_json({k: np.asarray(splits[k]).tolist() for k in SPLIT_KEYS}, out / "splits.json")
    dump_json({
        "source": str(Path(args.source).resolve()), "target": str(Path(args.target).resolve()),
        "source_sha256": _sha256(args.source), "target_sha256": _sha256(args.target),
        "epochs": history.epochs_run, "best_epoch": history.best_epoch,
        "val_loss": history.val_loss, "pseudo_label_positive_rate": float(labels.mean()),
    }, out / "pretrain.json")


def load_run(run) -> tuple:
    run = Path(run)
    cfg = apply_seed_override(parse_config(_read_json(run / "config.json")))
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in _read_json(run / "splits.json").items()}
    if set(splits) != set(SPLIT_KEYS):
        raise DataError(f"{run / 'splits.json'}: expected keys {list(SPLIT_KEYS)}")
    meta = _read_json(run / "pretrain.json")
    for key in ("source", "target"):
        if _sha256(meta[key]) != meta[f"{key}_sha256"]:
            raise DataError(f"{meta[key]} changed since pretraining")
    try:
        column = load_checkpoint(run / "source_column.ckpt").column(frozen=True)
    except FileNotFoundError as exc:
        raise IoFailure(f"{run}: missing source_column.ckpt") from exc
    return cfg, splits, meta, column


def cmd_adapt(args) -> None:
    cfg, splits, meta, column = load_run(args.run)
    overrides = {}
    if args.scratch:
        overrides["warm_start"] = False
    if args.no_calibration:
        overrides["calibration"] = False
    if args.no_adaptation_losses:
        overrides["adaptation_losses"] = False
    cfg["LoopConfig"] = dataclasses.replace(cfg["LoopConfig"], **overrides)
    source, target = _read_dataset(meta["source"]), _read_dataset(meta["target"])
    log = {"epochs": meta["epochs"], "best_epoch": meta["best_epoch"]}
    state = initialize_state(source, target, cfg["LoopConfig"], cfg["LossWeights"],
                             pretrained=column, splits=splits, pretrain_log=log)
    dump_json(config_document(cfg), Path(args.run) / "config.json")
    finish_run(state, out_dir=args.run)


def cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise InvalidConfig(f"--seeds must be a comma-separated list of integers: {args.seeds!r}") from exc
    result = run_ablation(args.suite, cfg["ShiftSpec"], seeds, cfg["LoopConfig"], cfg["LossWeights"])
    out = Path(args.out or f"ablation_{args.suite}")
    out.mkdir(parents=True, exist_ok=True)
    dump_json(config_document(cfg), out / "config.json")
    dump_json(result, out / "ablation.json")
    emit_report({"kind": "ablation", "suite": args.suite, "rows": ablation_rows(result)}, out)


def cmd_report(args) -> None:
    run = Path(args.run)
    if (run / "phase_metrics.json").exists():
        pm = _read_json(run / "phase_metrics.json")
        results = {"kind": "run", "seed": pm["seed"], "rows": run_rows(pm)}
    elif (run / "ablation.json").exists():
        ab = _read_json(run / "ablation.json")
        results = {"kind": "ablation", "suite": ab["suite"], "rows": ablation_rows(ab)}
    else:
        raise IoFailure(f"{run}: no phase_metrics.json or ablation.json to report on")
    emit_report(results, run, args.format)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dem", description="Directed evolution domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic source/target pair")
    p.add_argument("--spec", required=True, help="JSON file with ShiftSpec fields")
    p.add_argument("--out-source", required=True)
    p.add_argument("--out-target", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train and freeze the source column")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON config with LoopConfig / LossWeights / ShiftSpec sections")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run the screening and evolving phases")
    p.add_argument("--run", required=True)
    p.add_argument("--scratch", action="store_true", help="train every action from a fresh init")
    p.add_argument("--no-calibration", action="store_true",
                   help="fixed confidence filter and random mutation instead of calibrated policies")
    p.add_argument("--no-adaptation-losses", action="store_true",
                   help="drop the alignment losses during adaptation")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default ablation_<suite>)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="write report.json / report.csv for a run or ablation")
    p.add_argument("--run", required=True)
    p.add_argument("--format", default="json,csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DEMError as exc:
        print(f"dem {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dem {args.command}: {exc}", file=sys.stderr)
        return IoFailure.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
