import json

import numpy as np
import pytest

from crossseq import cli, evaluation
from crossseq.data import DOMAIN_A, DOMAIN_B, SyntheticSpec
from crossseq.experiments import (
    ExperimentConfig,
    load_dataset,
    mask_training_data,
    noisy_eval_data,
    resolve_model_config,
    run_expert_sweep,
    run_experiment,
    run_noise_sweep,
    run_overlap_sweep,
)
from crossseq.model import ModelConfig
from crossseq.trainer import TrainConfig, run_seeds


def tiny_experiment(tmp_path, **kw):
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(n_users=16, n_items_a=10, n_items_b=10,
                                min_len=6, max_len=10, seed=0),
        max_len=10,
        model=ModelConfig(n_items_a=0, n_items_b=0, hidden=8, n_experts=3,
                          n_shared=1, top_k=1, latent_dim=4, dropout=0.0),
        train=TrainConfig(max_epochs=2, warmup_epochs=1, patience=5,
                          batch_size=8, n_neg=6, n_pseudo=4, seed=0, n_seeds=1),
        out_dir=str(tmp_path / "exp"),
    )
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg


def test_config_roundtrip_and_hash(tmp_path):
    cfg = tiny_experiment(tmp_path)
    payload = cfg.to_dict()
    clone = ExperimentConfig.from_dict(payload)
    assert clone.config_hash() == cfg.config_hash()
    other = tiny_experiment(tmp_path, variant="no_AL")
    assert other.config_hash() != cfg.config_hash()

    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    from_file = ExperimentConfig.from_file(path)
    assert from_file.config_hash() == cfg.config_hash()


def test_config_from_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(
        'variant = "no_VD"\nout_dir = "runs/x"\n\n'
        "[synthetic]\nn_users = 8\nn_items_a = 6\nn_items_b = 6\n\n"
        "[train]\nmax_epochs = 3\nwarmup_epochs = 1\n"
    )
    cfg = ExperimentConfig.from_file(path)
    assert cfg.variant == "no_VD"
    assert cfg.synthetic.n_users == 8
    assert cfg.train.max_epochs == 3


def test_config_requires_exactly_one_source(tmp_path):
    cfg = tiny_experiment(tmp_path)
    cfg.data_path = "also.csv"
    with pytest.raises(ValueError):
        load_dataset(cfg)
    cfg.data_path = None
    cfg.synthetic = None
    with pytest.raises(ValueError):
        load_dataset(cfg)


def test_run_experiment_writes_reports_and_matches_direct_run(tmp_path):
    cfg = tiny_experiment(tmp_path)
    result = run_experiment(cfg)
    out = tmp_path / "exp"
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["config_hash"] == cfg.config_hash()
    assert metrics["variant"] == "full"
    assert (out / "metrics.csv").read_text().startswith("config_hash")

    dataset = load_dataset(cfg)
    direct = run_seeds(dataset, resolve_model_config(cfg, dataset), cfg.train,
                       k_seeds=1)
    assert direct["per_seed"][0]["report"] == result["per_seed"][0]["report"]


def test_run_experiment_variant_structure(tmp_path):
    cfg = tiny_experiment(tmp_path, variant="no_CAR")
    dataset = load_dataset(cfg)
    from crossseq.trainer import train

    model_cfg = resolve_model_config(cfg, dataset)
    result = train(dataset, model_cfg, cfg.train)
    assert all(row["l_c"] == 0.0 for row in result.log_rows)

    full_cfg = resolve_model_config(tiny_experiment(tmp_path), dataset)
    from crossseq.model import CrossDomainRecommender

    full = CrossDomainRecommender(full_cfg.__class__(**{**vars(full_cfg),
                                                        "variant": "full"}), 0)
    backbone = CrossDomainRecommender(full_cfg.__class__(**{**vars(full_cfg),
                                                            "variant": "backbone"}), 0)
    assert set(backbone.params) < set(full.params)


def test_mask_training_data_contract(tmp_path):
    cfg = tiny_experiment(tmp_path)
    dataset = load_dataset(cfg)
    masked = mask_training_data(dataset, 0.5, np.random.default_rng(0))
    assert len(masked.splits) == len(dataset.splits)
    changed = 0
    for before, after in zip(dataset.splits, masked.splits):
        assert after.test_targets == before.test_targets
        assert after.valid_targets == before.valid_targets
        if before.train.events() != after.train.events():
            changed += 1
            before_domains = {d for _i, d in before.train.events()}
            after_domains = {d for _i, d in after.train.events()}
            assert before_domains - after_domains  # a whole domain vanished
    assert changed == int(0.5 * len(dataset.splits))

    same = mask_training_data(dataset, 0.0, np.random.default_rng(0))
    for before, after in zip(dataset.splits, same.splits):
        np.testing.assert_array_equal(before.train.items_m, after.train.items_m)


def test_noisy_eval_data_contract(tmp_path):
    cfg = tiny_experiment(tmp_path)
    dataset = load_dataset(cfg)
    noisy1 = noisy_eval_data(dataset, 2, seed=7)
    noisy2 = noisy_eval_data(dataset, 2, seed=7)
    for split, n1, n2 in zip(dataset.splits, noisy1.splits, noisy2.splits):
        np.testing.assert_array_equal(n1.train.items_m, n2.train.items_m)
        assert n1.test_targets == split.test_targets
        original = split.train.events()
        spliced = n1.train.events()
        assert len(spliced) == min(len(original) + 2, dataset.max_len)
        it = iter(spliced)
        dropped = len(original) + 2 - len(spliced)
        survivors = original[dropped:] if dropped > 0 else original
        assert all(any(ev == o for ev in it) for o in survivors)


def test_run_overlap_sweep_outputs(tmp_path):
    cfg = tiny_experiment(tmp_path)
    rows = run_overlap_sweep(cfg, ratios=(0.0, 0.4))
    assert [row["ratio"] for row in rows] == [0.0, 0.4]
    lines = (tmp_path / "exp" / "overlap_sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("config_hash,seed,ratio")

    dataset = load_dataset(cfg)
    from crossseq.trainer import train

    clean = train(dataset, resolve_model_config(cfg, dataset), cfg.train)
    clean_report = evaluation.evaluate(clean.model, dataset, which="test",
                                       seed=cfg.train.seed)
    assert rows[0][f"mrr_{DOMAIN_A}"] == pytest.approx(clean_report[DOMAIN_A]["mrr"])


def test_run_noise_sweep_outputs(tmp_path):
    cfg = tiny_experiment(tmp_path)
    rows = run_noise_sweep(cfg, ks=(1, 3))
    assert [row["k"] for row in rows] == [1, 3]
    for row in rows:
        for domain in (DOMAIN_A, DOMAIN_B):
            deg = row[f"degradation_mrr_{domain}"]
            assert deg is None or np.isfinite(deg)
    assert (tmp_path / "exp" / "noise_sweep.csv").exists()


def test_run_expert_sweep_outputs(tmp_path):
    cfg = tiny_experiment(tmp_path)
    rows = run_expert_sweep(cfg, grid=[(3, 1, 1), (4, 2, 2)])
    assert [(r["n_experts"], r["n_shared"], r["top_k"]) for r in rows] == \
           [(3, 1, 1), (4, 2, 2)]
    assert (tmp_path / "exp" / "expert_sweep.csv").exists()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _write_cli_config(tmp_path):
    payload = {
        "synthetic": {"n_users": 14, "n_items_a": 10, "n_items_b": 10,
                      "min_len": 6, "max_len": 10, "seed": 0},
        "max_len": 10,
        "model": {"n_items_a": 0, "n_items_b": 0, "hidden": 8, "n_experts": 3,
                  "n_shared": 1, "top_k": 1, "latent_dim": 4, "dropout": 0.0},
        "train": {"max_epochs": 2, "warmup_epochs": 1, "patience": 5,
                  "batch_size": 8, "n_neg": 6, "n_pseudo": 4, "seed": 0,
                  "n_seeds": 1},
        "out_dir": str(tmp_path / "cli_run"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


def test_cli_synth_train_eval_roundtrip(tmp_path, capsys):
    cfg_path = _write_cli_config(tmp_path)

    assert cli.main(["synth", "--config", str(cfg_path),
                     "--out-dir", str(tmp_path / "synth")]) == 0
    synth_out = json.loads(capsys.readouterr().out)
    assert synth_out["users"] == 14

    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    train_out = json.loads(capsys.readouterr().out)
    assert train_out["checkpoint"]

    assert cli.main(["eval", "--config", str(cfg_path),
                     "--checkpoint", train_out["checkpoint"]]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["A"] is not None and "mrr" in report["A"]

    assert cli.main(["export-reprs", "--config", str(cfg_path),
                     "--checkpoint", train_out["checkpoint"],
                     "--out-dir", str(tmp_path / "reprs")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (tmp_path / "reprs" / "representations.csv").exists()
    assert out["router_probs"].endswith("router_probs.csv")


def test_cli_prep_roundtrip(tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    rows = ["user,item,domain,timestamp"]
    for u in range(6):
        rows += [f"{u},{1 + t},A,{t}" for t in range(6)]
        rows += [f"{u},{20 + t},B,{10 + t}" for t in range(6)]
    raw.write_text("\n".join(rows) + "\n")
    out = tmp_path / "cache.jsonl.gz"
    assert cli.main(["prep", "--input", str(raw), "--output", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["users"] == 6
    assert out.exists()


def test_cli_sweeps_and_ablate(tmp_path, capsys):
    cfg_path = _write_cli_config(tmp_path)
    assert cli.main(["sweep-overlap", "--config", str(cfg_path),
                     "--ratios", "0.0,0.4"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 2

    assert cli.main(["sweep-noise", "--config", str(cfg_path), "--ks", "1"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["k"] == 1

    assert cli.main(["sweep-experts", "--config", str(cfg_path),
                     "--grid", "3,1,1"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["n_experts"] == 3

    assert cli.main(["ablate", "--config", str(cfg_path),
                     "--variant", "backbone"]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert DOMAIN_A in agg


def test_cli_failure_emits_error_json(tmp_path, capsys):
    rc = cli.main(["eval", "--checkpoint", str(tmp_path / "missing.npz")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "message" in err
