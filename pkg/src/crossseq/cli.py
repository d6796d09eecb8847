"""Command-line surface.

Subcommands: prep, synth, train, eval, ablate, sweep-overlap, sweep-noise,
sweep-experts, export-reprs. Configuration comes from a JSON or TOML file
(see ExperimentConfig.from_file) with common flag overrides; failures exit
nonzero with a machine-readable error JSON on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON/TOML experiment config file")
    sub.add_argument("--seed", type=int, help="base seed override")
    sub.add_argument("--out-dir", help="output directory override")
    sub.add_argument("--eval-mode", choices=["full", "sampled"],
                     help="ranking candidate set")
    sub.add_argument("--eval-candidates", type=int,
                     help="candidate count for sampled mode")


def _load_config(args) -> "ExperimentConfig":
    from crossseq.experiments import ExperimentConfig

    cfg = (ExperimentConfig.from_file(args.config) if args.config
           else ExperimentConfig())
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "eval_mode", None):
        cfg.train = dataclasses.replace(cfg.train, eval_mode=args.eval_mode)
    if getattr(args, "eval_candidates", None):
        cfg.train = dataclasses.replace(cfg.train, eval_candidates=args.eval_candidates)
    if getattr(args, "epochs", None):
        cfg.train = dataclasses.replace(cfg.train, max_epochs=args.epochs)
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    return cfg


def _cmd_prep(args) -> int:
    from crossseq.data import preprocess, read_interaction_file, save_log

    log = read_interaction_file(args.input)
    out = preprocess(log, args.min_item_count, args.max_history)
    save_log(out, args.output)
    print(json.dumps({
        "users": len(out.by_user),
        "items_a": len(out.catalog_a),
        "items_b": len(out.catalog_b),
        "interactions": out.n_interactions,
        "output": str(args.output),
    }))
    return 0


def _cmd_synth(args) -> int:
    from crossseq.data import SyntheticSpec, save_log, synthesize_causal
    from crossseq.experiments import ExperimentConfig

    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        spec = cfg.synthetic or SyntheticSpec()
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out_dir = Path(args.out_dir or "runs/synth")
    out_dir.mkdir(parents=True, exist_ok=True)
    log, truth = synthesize_causal(spec)
    save_log(log, out_dir / "interactions.jsonl.gz")
    (out_dir / "ground_truth.json").write_text(truth.to_json())
    print(json.dumps({"users": len(log.by_user),
                      "interactions": log.n_interactions,
                      "out_dir": str(out_dir)}))
    return 0


def _cmd_train(args) -> int:
    from crossseq.experiments import load_dataset, resolve_model_config
    from crossseq.trainer import train

    cfg = _load_config(args)
    dataset = load_dataset(cfg)
    model_cfg = resolve_model_config(cfg, dataset)
    result = train(dataset, model_cfg, cfg.train, out_dir=cfg.out_dir,
                   resume=args.resume)
    print(json.dumps({
        "best_epoch": result.best_epoch,
        "best_val_mrr": result.best_metric,
        "stopped_epoch": result.stopped_epoch,
        "checkpoint": result.checkpoint_path,
    }))
    return 0


def _cmd_eval(args) -> int:
    from crossseq import evaluation
    from crossseq.experiments import load_dataset
    from crossseq.model import load_checkpoint

    cfg = _load_config(args)
    dataset = load_dataset(cfg)
    model, _header, _extras = load_checkpoint(args.checkpoint)
    report = evaluation.evaluate(model, dataset, which=args.split,
                                 mode=cfg.train.eval_mode,
                                 n_candidates=cfg.train.eval_candidates,
                                 seed=cfg.train.seed)
    print(json.dumps(report, indent=2))
    if args.out_dir or cfg.out_dir:
        out = Path(args.out_dir or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(
            {"config_hash": cfg.config_hash(), "seed": cfg.train.seed, **report},
            indent=2))
    return 0


def _cmd_ablate(args) -> int:
    from crossseq.experiments import run_ablations, run_experiment
    from crossseq.model import VARIANTS

    cfg = _load_config(args)
    if args.variant and args.variant != "all":
        result = run_experiment(cfg)
        agg = result["aggregate"]
    else:
        results = run_ablations(cfg, VARIANTS)
        agg = {v: r["aggregate"] for v, r in results.items()}
    print(json.dumps(agg, indent=2))
    return 0


def _cmd_sweep_overlap(args) -> int:
    from crossseq.experiments import run_overlap_sweep

    cfg = _load_config(args)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else None
    rows = run_overlap_sweep(cfg, ratios) if ratios else run_overlap_sweep(cfg)
    print(json.dumps(rows, indent=2))
    return 0


def _cmd_sweep_noise(args) -> int:
    from crossseq.experiments import run_noise_sweep
    from crossseq.model import load_checkpoint

    cfg = _load_config(args)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else None
    model = None
    if args.checkpoint:
        model, _h, _e = load_checkpoint(args.checkpoint)
    rows = (run_noise_sweep(cfg, ks, model=model) if ks
            else run_noise_sweep(cfg, model=model))
    print(json.dumps(rows, indent=2))
    return 0


def _cmd_sweep_experts(args) -> int:
    from crossseq.experiments import run_expert_sweep

    cfg = _load_config(args)
    grid = []
    for part in args.grid.split(";"):
        n, r, k = (int(x) for x in part.split(","))
        grid.append((n, r, k))
    rows = run_expert_sweep(cfg, grid)
    print(json.dumps(rows, indent=2))
    return 0


def _cmd_export_reprs(args) -> int:
    from crossseq.evaluation import export_representations
    from crossseq.experiments import load_dataset
    from crossseq.model import load_checkpoint

    cfg = _load_config(args)
    dataset = load_dataset(cfg)
    model, _header, _extras = load_checkpoint(args.checkpoint)
    users = [int(u) for u in args.users.split(",")] if args.users else None
    rep_path, router_path = export_representations(
        model, dataset, users, args.out_dir or cfg.out_dir)
    print(json.dumps({"representations": str(rep_path),
                      "router_probs": str(router_path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossseq",
        description="Cross-domain sequential recommendation lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="preprocess a raw interaction file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--max-history", type=int, default=50)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic causal dataset")
    _common_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one model")
    _common_flags(p)
    p.add_argument("--epochs", type=int, help="max epoch override")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "valid"], default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run ablation variants")
    _common_flags(p)
    p.add_argument("--variant", default="all",
                   help="one variant name, or 'all'")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep-overlap", help="user-overlap masking sweep")
    _common_flags(p)
    p.add_argument("--ratios", help="comma-separated masking ratios")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_sweep_overlap)

    p = sub.add_parser("sweep-noise", help="test-time noise-injection sweep")
    _common_flags(p)
    p.add_argument("--ks", help="comma-separated injection counts")
    p.add_argument("--checkpoint", help="reuse a trained checkpoint")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_sweep_noise)

    p = sub.add_parser("sweep-experts", help="expert-count sweep")
    _common_flags(p)
    p.add_argument("--grid", required=True,
                   help="semicolon-separated N,R,K triples, e.g. '5,2,2;8,2,3'")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_sweep_experts)

    p = sub.add_parser("export-reprs", help="export representations and router rows")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", help="comma-separated user ids (default: all)")
    p.set_defaults(func=_cmd_export_reprs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # machine-readable failure contract
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
