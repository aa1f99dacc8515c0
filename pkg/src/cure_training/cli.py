"""
Command-line entry point.

    cure train          [--config FILE | --manifest FILE] [--<key> VALUE ...]
    cure finetune       --finetune-source CKPT [--config FILE] [--<key> VALUE ...]
    cure certify        --checkpoint CKPT [--bound-diffs] [--<key> VALUE ...]
    cure attack         --checkpoint CKPT [--norm linf|l2|both] [--<key> VALUE ...]
    cure export-bounds  --checkpoint CKPT [--small-box] [--<key> VALUE ...]
    cure report         --method NAME=eval_report.json ... --out table.csv

Every TrainConfig key is accepted as a flag (``--eps-inf 0.1``). Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations
import argparse
import json
import os
import sys
from dataclasses import fields
from typing import Dict, Optional, Sequence

from . import __version__
from .attacks import AttackConfig
from .certify import (
    EVAL_RESTARTS,
    EVAL_STEPS,
    empirical_accuracy,
    evaluate,
    export_bound_diffs,
    write_comparison,
    write_report,
)
from .checkpoint import load_checkpoint
from .config import RunManifest, TrainConfig, parse_config
from .data import Dataset, find_mnist_files, load_mnist_idx, make_synthetic
from .errors import ConfigError, CureError
from .logging_setup import attach_run_log, detach_run_log, get_logger
from .trainer import Trainer

logger = get_logger("cure_training.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

VERSION = f"cure-training {__version__}"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    group = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {
        key[len("cfg_"):]: value
        for key, value in vars(args).items()
        if key.startswith("cfg_") and value is not None
    }


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cure", description="Multi-norm certified training and evaluation")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a network with the configured mode")
    _add_config_flags(p)
    p.add_argument("--manifest", help="replay a run from its manifest.json")

    p = sub.add_parser("finetune", help="fine-tune a single-norm checkpoint with the scratch loss")
    _add_config_flags(p)

    p = sub.add_parser("certify", help="certified and empirical evaluation of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=EVAL_STEPS, help="PGD steps for the empirical check")
    p.add_argument("--restarts", type=int, default=EVAL_RESTARTS)
    p.add_argument("--bound-diffs", action="store_true", help="also write bound_diffs.csv")

    p = sub.add_parser("attack", help="empirical PGD accuracy only")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--norm", choices=("linf", "l2", "both"), default="both")
    p.add_argument("--steps", type=int, default=EVAL_STEPS)
    p.add_argument("--restarts", type=int, default=EVAL_RESTARTS)

    p = sub.add_parser("export-bounds", help="per-sample bound differences as CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--small-box", action="store_true",
                   help="bound the small propagation boxes (lambda_inf, lambda_2) instead of the full regions")
    p.add_argument("--out", help="CSV path (default <out_dir>/bound_diffs.csv)")

    p = sub.add_parser("report", help="merge eval reports into one comparison table")
    p.add_argument("--method", action="append", default=[], metavar="NAME=PATH", required=True)
    p.add_argument("--out", required=True)
    return parser


# =========================
# Data
# =========================

def load_dataset(cfg: TrainConfig, split: str) -> Dataset:
    if cfg.dataset == "mnist":
        images, labels = find_mnist_files(cfg.data_dir, split)
        limit = cfg.train_size if split == "train" else cfg.test_size
        return load_mnist_idx(images, labels, split=split, limit=limit or None)
    side = cfg.synthetic_side
    n = cfg.synthetic_n if split == "train" else (cfg.test_size or cfg.synthetic_n)
    return make_synthetic(n, cfg.synthetic_classes, (1, side, side), seed=cfg.seed,
                          noise=cfg.synthetic_noise, split=split)


# =========================
# Commands
# =========================

def _train(args: argparse.Namespace, finetune: bool) -> int:
    overrides = _overrides(args)
    replayed: Optional[RunManifest] = None
    if getattr(args, "manifest", None):
        replayed = RunManifest.read(args.manifest)
        cfg = parse_config(overrides={**replayed.config, **overrides}, environ={})
    else:
        if finetune:
            overrides["mode"] = "finetune"
        cfg = parse_config(args.config, overrides=overrides)
    data = load_dataset(cfg, "train").subset(cfg.train_size or None)
    if replayed is not None and replayed.dataset_fingerprint != data.fingerprint():
        raise ConfigError(
            f"{args.manifest}: dataset fingerprint {data.fingerprint()} does not match the recorded "
            f"{replayed.dataset_fingerprint}"
        )

    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(
        config=cfg.to_dict(),
        dataset_fingerprint=data.fingerprint(),
        seed=cfg.seed,
        version=VERSION,
        outputs={
            "checkpoint": os.path.join(out_dir, "checkpoints", "final.ckpt"),
            "train_log": os.path.join(out_dir, "train_log.csv"),
            "log": os.path.join(out_dir, "train.log"),
        },
    )
    manifest.write(os.path.join(out_dir, "manifest.json"))
    handler = attach_run_log(os.path.join(out_dir, "train.log"))
    try:
        trainer = Trainer(cfg, data, out_dir=out_dir)
        trainer.install_signal_handlers()
        if cfg.mode == "finetune":
            trainer.finetune()
        else:
            trainer.train()
    finally:
        detach_run_log(handler)
    logger.info("Run written to %s", out_dir)
    return EXIT_OK


def _certify(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, overrides=_overrides(args))
    net = load_checkpoint(args.checkpoint)
    data = load_dataset(cfg, "test").subset(cfg.test_size or None)
    report = evaluate(
        net, data, cfg.eps_inf, cfg.eps_2,
        attack_steps=args.steps, restarts=args.restarts, seed=cfg.seed,
        worker_threads=cfg.worker_threads,
        config={
            "checkpoint": args.checkpoint, "eps_inf": cfg.eps_inf, "eps_2": cfg.eps_2,
            "dataset": cfg.dataset, "n_samples": len(data), "pgd_steps": args.steps,
            "pgd_restarts": args.restarts, "seed": cfg.seed,
        },
        version=VERSION,
        with_bound_diffs=args.bound_diffs,
    )
    write_report(report, cfg.out_dir)
    print(json.dumps(report.aggregates, sort_keys=True))
    return EXIT_OK


def _attack(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, overrides=_overrides(args))
    net = load_checkpoint(args.checkpoint)
    data = load_dataset(cfg, "test").subset(cfg.test_size or None)
    norms = ("linf", "l2") if args.norm == "both" else (args.norm,)
    results = {}
    for norm in norms:
        eps = cfg.eps_inf if norm == "linf" else cfg.eps_2
        attack = AttackConfig(norm=norm, eps=eps, steps=args.steps, seed=cfg.seed,
                              restarts=args.restarts, l2_projection=cfg.l2_projection)
        results[f"pgd_{norm}"] = empirical_accuracy(net, data, attack)
        logger.info("PGD-%s eps=%s steps=%d restarts=%d: %.2f%%", norm, eps, args.steps,
                    args.restarts, results[f"pgd_{norm}"])
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def _export_bounds(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, overrides=_overrides(args))
    net = load_checkpoint(args.checkpoint)
    data = load_dataset(cfg, "test").subset(cfg.test_size or None)
    path = args.out or os.path.join(cfg.out_dir, "bound_diffs.csv")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    lam_inf = cfg.resolved_lambda_inf if args.small_box else None
    lam_2 = cfg.lambda_2 if args.small_box else None
    export_bound_diffs(net, data.images, data.labels, cfg.eps_inf, cfg.eps_2, lam_inf, lam_2, path,
                       attack_steps=cfg.attack_steps, seed=cfg.seed)
    return EXIT_OK


def _report(args: argparse.Namespace) -> int:
    reports: Dict[str, str] = {}
    for item in args.method:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--method expects NAME=PATH, got {item!r}")
        reports[name] = path
    rows = write_comparison(reports, args.out)
    for row in rows:
        logger.info("%-16s clean=%6.2f linf=%6.2f l2=%6.2f union=%6.2f",
                    row["method"], row["clean"], row["linf"], row["l2"], row["union"])
    return EXIT_OK


_COMMANDS = {
    "train": lambda a: _train(a, finetune=False),
    "finetune": lambda a: _train(a, finetune=True),
    "certify": _certify,
    "attack": _attack,
    "export-bounds": _export_bounds,
    "report": _report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_USAGE
    except (CureError, OSError, ValueError, RuntimeError) as e:
        logger.error("Command failed: %s", e, exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
