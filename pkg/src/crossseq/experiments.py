"""Experiment drivers: ablation variants, overlap/noise/expert sweeps,
and the report files they write.

Every output file carries the config hash and base seed for provenance.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from crossseq import evaluation
from crossseq.data import (
    DOMAIN_A,
    DOMAIN_B,
    Interaction,
    InteractionLog,
    PreparedData,
    SplitTriple,
    SyntheticSpec,
    inject_noise,
    load_log,
    mask_overlap,
    prepare,
    preprocess,
    read_interaction_file,
    synthesize_causal,
    triple_from_events,
)
from crossseq.model import ModelConfig, VARIANTS
from crossseq.trainer import TrainConfig, run_seeds, train

DEFAULT_OVERLAP_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8)
DEFAULT_NOISE_KS = (1, 2, 3)


@dataclass
class ExperimentConfig:
    """One experiment: a data source, a model, a schedule, and a variant."""

    data_path: str | None = None
    synthetic: SyntheticSpec | None = None
    preprocess_data: bool = False
    min_item_count: int = 5
    max_history: int = 50
    max_len: int = 50
    model: ModelConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "full"
    n_seeds: int | None = None
    out_dir: str = "runs/experiment"

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        cfg = cls()
        payload = dict(payload)
        if "synthetic" in payload and payload["synthetic"] is not None:
            spec = dict(payload.pop("synthetic"))
            if spec.get("transition") is not None:
                spec["transition"] = np.asarray(spec["transition"], dtype=float)
            cfg.synthetic = SyntheticSpec(**spec)
        if "model" in payload and payload["model"] is not None:
            cfg.model = ModelConfig(**payload.pop("model"))
        if "train" in payload and payload["train"] is not None:
            cfg.train = TrainConfig(**payload.pop("train"))
        for key, value in payload.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib

            payload = tomllib.loads(text)
        else:
            payload = json.loads(text)
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.synthetic is not None and out["synthetic"].get("transition") is not None:
            out["synthetic"]["transition"] = np.asarray(
                out["synthetic"]["transition"]).tolist()
        return out

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_dataset(cfg: ExperimentConfig) -> PreparedData:
    if (cfg.data_path is None) == (cfg.synthetic is None):
        raise ValueError("config needs exactly one of data_path or synthetic")
    if cfg.synthetic is not None:
        logdata, _truth = synthesize_causal(cfg.synthetic)
    else:
        path = str(cfg.data_path)
        try:
            logdata = load_log(path)
        except Exception:
            logdata = read_interaction_file(path)
        if cfg.preprocess_data:
            logdata = preprocess(logdata, cfg.min_item_count, cfg.max_history)
    return prepare(logdata, cfg.max_len)


def resolve_model_config(cfg: ExperimentConfig, dataset: PreparedData) -> ModelConfig:
    base = cfg.model if cfg.model is not None else ModelConfig(0, 0)
    return replace(base, n_items_a=dataset.n_items_a, n_items_b=dataset.n_items_b,
                   max_len=cfg.max_len, variant=cfg.variant)


# ---------------------------------------------------------------------------
# report writing
# ---------------------------------------------------------------------------


def write_metrics(out_dir, result: dict, cfg: ExperimentConfig,
                  name: str = "metrics") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.train.seed,
        "variant": cfg.variant,
        **result,
    }
    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(payload, indent=2))

    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", "seed", "variant", "domain", "metric",
                         "value", "kind"])
        for entry in result["per_seed"]:
            for domain in (DOMAIN_A, DOMAIN_B):
                metrics = entry["report"].get(domain)
                if metrics is None:
                    continue
                for metric in evaluation.METRIC_NAMES:
                    writer.writerow([cfg.config_hash(), entry["seed"], cfg.variant,
                                     domain, metric, metrics[metric], "per_seed"])
        for domain in (DOMAIN_A, DOMAIN_B):
            agg = result["aggregate"].get(domain)
            if agg is None:
                continue
            for metric in evaluation.METRIC_NAMES:
                writer.writerow([cfg.config_hash(), cfg.train.seed, cfg.variant,
                                 domain, metric, agg[metric]["mean"], "mean"])
                writer.writerow([cfg.config_hash(), cfg.train.seed, cfg.variant,
                                 domain, metric, agg[metric]["std"], "std"])
    return json_path, csv_path


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, dataset: PreparedData | None = None) -> dict:
    """Train and evaluate one variant over the configured seeds."""
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    dataset = dataset if dataset is not None else load_dataset(cfg)
    model_cfg = resolve_model_config(cfg, dataset)
    result = run_seeds(dataset, model_cfg, cfg.train, k_seeds=cfg.n_seeds,
                       out_dir=cfg.out_dir)
    write_metrics(cfg.out_dir, result, cfg)
    return result


def run_ablations(cfg: ExperimentConfig, variants: Sequence[str] = VARIANTS,
                  dataset: PreparedData | None = None) -> dict[str, dict]:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    out: dict[str, dict] = {}
    for variant in variants:
        sub = replace(cfg, variant=variant,
                      out_dir=str(Path(cfg.out_dir) / variant))
        out[variant] = run_experiment(sub, dataset=dataset)
    return out


def _train_portion_log(dataset: PreparedData) -> InteractionLog:
    by_user = {}
    for split in dataset.splits:
        by_user[split.user_id] = [
            Interaction(split.user_id, item, domain, t)
            for t, (item, domain) in enumerate(split.train.events())
        ]
    return InteractionLog(by_user,
                          set(dataset.catalog_a.tolist()),
                          set(dataset.catalog_b.tolist()))


def mask_training_data(dataset: PreparedData, ratio: float,
                       rng: np.random.Generator) -> PreparedData:
    """Overlap-mask the training timelines; evaluation targets are untouched."""
    masked = mask_overlap(_train_portion_log(dataset), ratio, rng)
    new_splits = []
    for split in dataset.splits:
        events = [(it.item_id, it.domain) for it in masked.by_user[split.user_id]]
        train = triple_from_events(split.user_id, events, dataset.max_len)
        new_splits.append(SplitTriple(split.user_id, train,
                                      dict(split.valid_targets),
                                      dict(split.test_targets)))
    return PreparedData(log=masked, triples=dataset.triples, splits=new_splits,
                        max_len=dataset.max_len, catalog_a=dataset.catalog_a,
                        catalog_b=dataset.catalog_b, id_map=dataset.id_map)


def run_overlap_sweep(cfg: ExperimentConfig,
                      ratios: Sequence[float] = DEFAULT_OVERLAP_RATIOS,
                      dataset: PreparedData | None = None) -> list[dict]:
    """One train+eval per masking ratio; writes overlap_sweep.csv."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    rows = []
    for ratio in ratios:
        masked = mask_training_data(dataset, ratio,
                                    np.random.default_rng([cfg.train.seed, int(ratio * 100)]))
        model_cfg = resolve_model_config(cfg, masked)
        result = train(masked, model_cfg, cfg.train)
        report = evaluation.evaluate(result.model, masked, which="test",
                                     mode=cfg.train.eval_mode,
                                     n_candidates=cfg.train.eval_candidates,
                                     seed=cfg.train.seed)
        row = {"ratio": ratio}
        for domain in (DOMAIN_A, DOMAIN_B):
            metrics = report.get(domain)
            for name in evaluation.METRIC_NAMES:
                row[f"{name}_{domain}"] = None if metrics is None else metrics[name]
        rows.append(row)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "overlap_sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["config_hash", "seed"] + list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({"config_hash": cfg.config_hash(),
                             "seed": cfg.train.seed, **row})
    return rows


def noisy_eval_data(dataset: PreparedData, k: int, seed: int) -> PreparedData:
    """Inject k random items into every evaluation input sequence."""
    new_splits = []
    for split in dataset.splits:
        rng = np.random.default_rng([seed, split.user_id, k])
        train = inject_noise(split.train, k, rng,
                             dataset.catalog_a, dataset.catalog_b)
        new_splits.append(SplitTriple(split.user_id, train,
                                      dict(split.valid_targets),
                                      dict(split.test_targets)))
    return PreparedData(log=dataset.log, triples=dataset.triples, splits=new_splits,
                        max_len=dataset.max_len, catalog_a=dataset.catalog_a,
                        catalog_b=dataset.catalog_b, id_map=dataset.id_map)


def run_noise_sweep(cfg: ExperimentConfig, ks: Sequence[int] = DEFAULT_NOISE_KS,
                    dataset: PreparedData | None = None,
                    model=None) -> list[dict]:
    """Evaluate one trained checkpoint on noise-injected test-time inputs.

    Reports per-metric degradation (clean - noisy) / clean.
    """
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if model is None:
        model_cfg = resolve_model_config(cfg, dataset)
        model = train(dataset, model_cfg, cfg.train).model
    clean = evaluation.evaluate(model, dataset, which="test",
                                mode=cfg.train.eval_mode,
                                n_candidates=cfg.train.eval_candidates,
                                seed=cfg.train.seed)
    rows = []
    for k in ks:
        noisy = evaluation.evaluate(model, noisy_eval_data(dataset, k, cfg.train.seed),
                                    which="test", mode=cfg.train.eval_mode,
                                    n_candidates=cfg.train.eval_candidates,
                                    seed=cfg.train.seed)
        row = {"k": k}
        for domain in (DOMAIN_A, DOMAIN_B):
            c, n = clean.get(domain), noisy.get(domain)
            for name in evaluation.METRIC_NAMES:
                if c is None or n is None or c[name] == 0:
                    row[f"degradation_{name}_{domain}"] = None
                else:
                    row[f"degradation_{name}_{domain}"] = (c[name] - n[name]) / c[name]
                row[f"{name}_{domain}"] = None if n is None else n[name]
        rows.append(row)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "noise_sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["config_hash", "seed"] + list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({"config_hash": cfg.config_hash(),
                             "seed": cfg.train.seed, **row})
    return rows


def run_expert_sweep(cfg: ExperimentConfig,
                     grid: Sequence[tuple[int, int, int]],
                     dataset: PreparedData | None = None) -> list[dict]:
    """Train+eval per (N, R, K) combination; writes expert_sweep.csv."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    rows = []
    for n, r, k in grid:
        model_cfg = replace(resolve_model_config(cfg, dataset),
                            n_experts=n, n_shared=r, top_k=k)
        result = train(dataset, model_cfg, cfg.train)
        report = evaluation.evaluate(result.model, dataset, which="test",
                                     mode=cfg.train.eval_mode,
                                     n_candidates=cfg.train.eval_candidates,
                                     seed=cfg.train.seed)
        row = {"n_experts": n, "n_shared": r, "top_k": k}
        for domain in (DOMAIN_A, DOMAIN_B):
            metrics = report.get(domain)
            for name in evaluation.METRIC_NAMES:
                row[f"{name}_{domain}"] = None if metrics is None else metrics[name]
        rows.append(row)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "expert_sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["config_hash", "seed"] + list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({"config_hash": cfg.config_hash(),
                             "seed": cfg.train.seed, **row})
    return rows
