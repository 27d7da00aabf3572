"""Command line entry point (``stamp``).

Every subcommand reads an optional TOML config (see :mod:`stamp.harness.config`)
and accepts flags that override its top-level keys.  Failures print a JSON
object ``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from ..backbone import PrunedArchitecture
from ..checkpoint import load_network, load_stamp, save_network, save_stamp
from ..meta import compact_network, evaluate, finetune, meta_train, prune_target
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import data_size_study, prepare_data, run_experiment
from .reports import emit_data_size, emit_reports, load_report

log = logging.getLogger("stamp")


def _config(args) -> ExperimentConfig:
    overrides = {
        "seeds": args.seeds, "outdir": getattr(args, "out", None), "methods": getattr(args, "methods", None),
        "kappa": getattr(args, "kappa", None), "checkpoint": getattr(args, "checkpoint", None),
        "data_sizes": getattr(args, "sizes", None),
    }
    train = {k: v for k, v in (("epochs", args.epochs), ("kl_scale", args.kl_scale), ("K", args.K),
                               ("finetune_epochs", args.finetune_epochs)) if v is not None}
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    if train:
        cfg.train = replace(cfg.train, **train)
    return cfg


def cmd_meta_train(args):
    cfg = _config(args)
    data = prepare_data(cfg)
    seed = cfg.seeds[0]
    tcfg = replace(cfg.train, seed=seed)
    result = meta_train(tcfg, data.reference_train, data.split, arch=cfg.arch,
                        log_path=Path(args.out).with_suffix(".log.jsonl") if args.log else None)
    save_stamp(result.model, args.out, step=tcfg.epochs, seed=seed, extra={"train_config": tcfg.to_dict()})
    return {"checkpoint": str(args.out), "meta_time_s": result.meta_time_s}


def cmd_prune(args):
    cfg = _config(args)
    data = prepare_data(cfg)
    model, _ = load_stamp(args.checkpoint)
    seed = cfg.seeds[0]
    pruned = prune_target(model, data.target_train, cfg.train.K, replace(cfg.train, seed=seed), seed)
    out = Path(args.out)
    save_network(compact_network(pruned), out, extra={"architecture": pruned.arch.to_dict()})
    return {"network": str(out), "search_time_s": pruned.search_time_s, **pruned.arch.to_dict()}


def cmd_finetune(args):
    cfg = _config(args)
    data = prepare_data(cfg)
    net, meta = load_network(args.network)
    seed = cfg.seeds[0]
    net, metrics = finetune(net, data.target_train, data.target_test, cfg.train.finetune_epochs, cfg.train, seed)
    save_network(net, args.out, extra={k: v for k, v in meta.items() if k == "architecture"})
    return {"network": str(args.out), **metrics}


def cmd_evaluate(args):
    cfg = _config(args)
    data = prepare_data(cfg)
    net, meta = load_network(args.network)
    out = {"accuracy": evaluate(net, data.target_test)}
    if "architecture" in meta:
        arch = PrunedArchitecture.from_dict(meta["architecture"])
        out.update(params_ratio=arch.params_ratio, flops_ratio=arch.flops_ratio)
    return out


def cmd_experiment(args):
    cfg = _config(args)
    report = run_experiment(cfg, progress=lambda r: log.info("%s seed %d: %s acc=%s flops=%s", r.method, r.seed,
                                                             r.status, r.accuracy, r.flops_ratio))
    files = emit_reports(report, cfg.outdir, cfg.formats)
    return {"rows": report.rows, "files": [str(f) for f in files]}


def cmd_data_size(args):
    cfg = _config(args)
    study = data_size_study(cfg)
    files = emit_data_size(study, cfg.outdir, cfg.formats)
    return {"table": study["table"], "files": [str(f) for f in files]}


def cmd_report(args):
    report = load_report(args.input)
    out = args.out or str(Path(args.input).parent)
    files = emit_reports(report, out, tuple(args.formats.split(",")))
    return {"files": [str(f) for f in files]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stamp", description="Set-conditioned meta-pruning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--epochs", type=int, help="meta-training epochs")
        p.add_argument("--kl-scale", type=float)
        p.add_argument("--K", type=int, help="pruning passes on the target task")
        p.add_argument("--finetune-epochs", type=int)
        return p

    p = common(sub.add_parser("meta-train", help="meta-train on the reference tasks and save a checkpoint"))
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="store_true", help="write per-task JSON lines next to the checkpoint")
    p.set_defaults(func=cmd_meta_train)

    p = common(sub.add_parser("prune", help="prune the target task from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = common(sub.add_parser("finetune", help="fine-tune a saved (compact) network on the target task"))
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="target test accuracy of a saved network"))
    p.add_argument("--network", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("experiment", help="all arms over all seeds, with reports"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--kappa", type=float)
    p.add_argument("--checkpoint", help="reuse a meta-trained checkpoint for every seed")
    p.set_defaults(func=cmd_experiment)

    p = common(sub.add_parser("data-size-study", help="accuracy and time against target set size"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_data_size)

    p = sub.add_parser("report", help="re-render tables and figures from report.json")
    p.add_argument("input")
    p.add_argument("--out")
    p.add_argument("--formats", default="csv,json,png")
    p.set_defaults(func=cmd_report, seeds=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
