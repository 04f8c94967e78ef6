"""Command line: ``semicap {generate,train,eval,ablate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .data import Dataset, DatasetFormatError, generate, load_external, save_dataset, split_scarcely_paired
from .evaluate import MetricsReport, evaluate
from .models import load_checkpoint, save_checkpoint
from .pseudo import read_assignments
from .trainer import VARIANTS, TrainingAborted, model_config_for, train, write_history

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2
CONFIG_SNAPSHOT = "config.cfg"


class UsageError(Exception):
    pass


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already holds a run; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    train = cfg.train
    if getattr(args, "variant", None):
        if args.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
        train = replace(train, variant=args.variant)
    if getattr(args, "beam", None) is not None:
        if args.beam < 1:
            raise ConfigError("--beam must be >= 1")
        train = replace(train, beam_size=args.beam)
    return replace(cfg, train=train)


def _dataset(cfg: RunConfig, data: Optional[str]) -> Dataset:
    return load_external(data) if data else generate(cfg.gen_config())


def _bundle(cfg: RunConfig, data: Optional[str]):
    return split_scarcely_paired(_dataset(cfg, data), cfg.paired_fraction, cfg.test_fraction, seed=cfg.data_seed)


def _run_one(cfg: RunConfig, bundle, out: Path, data: Optional[str]) -> MetricsReport:
    (out / CONFIG_SNAPSHOT).write_text(cfgmod.dumps(cfg), encoding="utf-8")
    model_cfg = model_config_for(bundle, **cfg.model_overrides())
    with open(out / "assignments.jsonl", "w", encoding="utf-8") as fh:
        result = train(cfg.train, bundle, model_cfg, assignment_log=fh)
    write_history(result.history, out / "metrics.csv")
    save_checkpoint(result.params, out / "checkpoint.json",
                    extra={"config": cfgmod.to_mapping(cfg), "data": data})
    if result.metrics is not None:
        (out / "metrics.json").write_text(result.metrics.to_json(), encoding="utf-8")
    return result.metrics


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(Path(args.out), args.force)
    ds = generate(cfg.gen_config())
    save_dataset(ds, out / "dataset.jsonl")
    (out / CONFIG_SNAPSHOT).write_text(cfgmod.dumps(cfg), encoding="utf-8")
    print(f"wrote {len(ds)} samples to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    bundle = _bundle(cfg, args.data)
    out = _prepare_out(Path(args.out), args.force)
    metrics = _run_one(cfg, bundle, out, args.data)
    if metrics is not None:
        print(f"{cfg.train.variant}: bleu4={metrics.bleu4:.4f} token_f1={metrics.token_f1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, extra = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _resolve(args)
    else:
        stored = {k: str(v) for k, v in extra.get("config", {}).items()}
        cfg = cfgmod.from_mapping(stored)
        if args.beam is not None:
            cfg = replace(cfg, train=replace(cfg.train, beam_size=args.beam))
    data = args.data or extra.get("data")
    bundle = _bundle(cfg, data)
    assignments, concept_of = None, None
    dump = Path(args.checkpoint).with_name("assignments.jsonl")
    if dump.exists() and bundle.has_concepts:
        assignments = read_assignments(dump)
        concept_of = {i: s.concept_id for i, s in bundle.by_id.items()}
    metrics = evaluate(params, bundle.test, cfg.train.beam_size, assignments, concept_of)
    out = _prepare_out(Path(args.out), args.force)
    (out / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")
    print(metrics.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    bundle = _bundle(cfg, args.data)
    out = _prepare_out(Path(args.out), args.force)
    rows = []
    for variant in VARIANTS:
        run_dir = out / variant
        run_dir.mkdir(exist_ok=True)
        run_cfg = replace(cfg, train=replace(cfg.train, variant=variant))
        metrics = _run_one(run_cfg, bundle, run_dir, args.data)
        rows.append({"variant": variant, **(vars(metrics) if metrics else {})})
        print(f"{variant}: bleu4={metrics.bleu4:.4f}" if metrics else f"{variant}: no evaluation")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant"] + MetricsReport.columns())
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semicap", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True, beam=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override data_seed and seed")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        if variant:
            sp.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
        if beam:
            sp.add_argument("--beam", type=int, help="beam size for decoding")

    g = sub.add_parser("generate", help="write the synthetic benchmark as JSONL")
    common(g, variant=False, beam=False)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--data", help="JSONL dataset instead of the generated benchmark")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    common(e, variant=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="JSONL dataset (defaults to the one recorded in the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every variant on one shared split")
    common(a, variant=False)
    a.add_argument("--data", help="JSONL dataset instead of the generated benchmark")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, DatasetFormatError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
