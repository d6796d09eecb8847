"""Optimization loop: AdamW with warm-up, stagnation-triggered LR decay,
gradient-reversal ramp, early stopping on aggregate validation MRR, and
multi-seed orchestration.

Every source of randomness is a numpy Generator derived from
(seed, epoch, purpose), so a (config, seed) pair fully determines the run,
including resumed runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from crossseq import autodiff as ad
from crossseq import data as datamod
from crossseq import evaluation
from crossseq.data import PreparedData, SplitTriple, generate_pseudo_sequences
from crossseq.model import (
    CrossDomainRecommender,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from crossseq.objectives import LossWeights, compute_losses, estimate_router_priors

log = logging.getLogger(__name__)

_RNG_SHUFFLE, _RNG_NEGATIVES, _RNG_FORWARD, _RNG_PSEUDO = 0, 1, 2, 3


@dataclass
class TrainConfig:
    max_epochs: int = 600
    warmup_epochs: int = 10
    patience: int = 60
    lr: float = 5e-4
    weight_decay: float = 0.0
    lr_decay_factor: float = 1.0
    lr_decay_patience: int = 30
    batch_size: int = 64
    n_neg: int = 128
    n_pseudo: int = 16
    grl_ramp_frac: float = 0.4
    grl_max: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0
    n_seeds: int = 5
    precision: str = "double"
    lambda1: float = 0.3
    lambda2: float = 0.1
    lambda3: float = 1.0
    tau: float = 0.75
    eval_mode: str = "full"
    eval_candidates: int = 100
    checkpoint_every: int = 0  # 0 = only after training finishes

    def validate(self) -> None:
        if not self.warmup_epochs < self.max_epochs:
            raise ValueError("warmup_epochs must be below max_epochs")
        if self.patience <= 0:
            raise ValueError("patience must be positive")
        if not 0.1 <= self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must be in [0.1, 1.0]")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if self.n_pseudo < 1:
            raise ValueError("n_pseudo must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.tau)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Non-finite gradients skip the whole step (three consecutive skips abort);
    weight decay multiplies parameters directly instead of being folded into
    the gradient.
    """

    def __init__(self, params: Mapping[str, ad.Tensor], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.step_count = 0
        self.consecutive_skips = 0

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False when skipped on non-finite grads."""
        lr = self.lr if lr is None else lr
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.all(np.isfinite(g)):
                self.consecutive_skips += 1
                log.warning("optimizer: non-finite gradient in %s, step skipped", name)
                if self.consecutive_skips >= 3:
                    raise RuntimeError("three consecutive non-finite-gradient steps")
                return False
            grads[name] = g
        self.consecutive_skips = 0
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            if self.weight_decay:
                p.values = p.values * (1.0 - lr * self.weight_decay)
            p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m:{k}": v for k, v in self.m.items()}
        out.update({f"v:{k}": v for k, v in self.v.items()})
        out["step_count"] = np.array(self.step_count)
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"m:{k}"])
            self.v[k] = np.asarray(arrays[f"v:{k}"])
        self.step_count = int(arrays["step_count"])


def clip_gradients(params: Mapping[str, ad.Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class ScheduleState:
    base_lr: float
    warmup_epochs: int
    decay_factor: float
    n_decays: int = 0


def lr_schedule(epoch: int, state: ScheduleState) -> float:
    """Linear warm-up to the base rate, then stagnation-triggered decay."""
    if epoch < state.warmup_epochs:
        return state.base_lr * (epoch + 1) / state.warmup_epochs
    return state.base_lr * state.decay_factor ** state.n_decays


def grl_lambda_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Linear 0 -> grl_max over the first grl_ramp_frac of max_epochs."""
    ramp = max(1, int(np.ceil(cfg.grl_ramp_frac * cfg.max_epochs)))
    return cfg.grl_max * min(1.0, epoch / ramp)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TrainingBatch:
    items_m: np.ndarray
    items_a: np.ndarray
    items_b: np.ndarray
    flags: np.ndarray
    m_index: tuple[np.ndarray, np.ndarray]
    m_pos: np.ndarray
    m_neg: np.ndarray
    a_index: tuple[np.ndarray, np.ndarray]
    a_pos: np.ndarray
    a_neg: np.ndarray
    b_index: tuple[np.ndarray, np.ndarray]
    b_pos: np.ndarray
    b_neg: np.ndarray


def _sample_negative_matrix(catalog: np.ndarray, positives: np.ndarray, k: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Distinct uniform negatives per row via random-key top-k, positive excluded."""
    p = positives.shape[0]
    if p == 0 or k == 0:
        return np.zeros((p, k), dtype=np.int64)
    keys = rng.random((p, catalog.size))
    pos_col = np.searchsorted(catalog, positives)
    keys[np.arange(p), pos_col] = np.inf
    cols = np.argpartition(keys, k - 1, axis=1)[:, :k]
    return catalog[cols]


def build_training_batch(triples: Sequence, catalog_a: np.ndarray,
                         catalog_b: np.ndarray, n_neg: int,
                         rng: np.random.Generator) -> TrainingBatch:
    """Stack triples and sample per-position positives/negatives.

    Merged-stream positions predict the next timeline item (negatives drawn
    from that item's domain); domain streams predict the next same-domain
    item. The negative count is clamped to catalog size minus one.
    """
    items_m = np.stack([t.items_m for t in triples])
    items_a = np.stack([t.items_a for t in triples])
    items_b = np.stack([t.items_b for t in triples])
    flags = np.stack([t.domain_flags for t in triples])
    b, t_len = flags.shape
    n_a = min(n_neg, catalog_a.size - 1)
    n_b = min(n_neg, catalog_b.size - 1)
    boundary = catalog_a.max() if catalog_a.size else 0

    m_rows, m_cols, m_pos = [], [], []
    for i in range(b):
        valid = np.nonzero(flags[i] != datamod.FLAG_PAD)[0]
        for j in range(len(valid) - 1):
            m_rows.append(i)
            m_cols.append(valid[j])
            m_pos.append(items_m[i, valid[j + 1]])
    m_index = (np.asarray(m_rows, dtype=np.intp), np.asarray(m_cols, dtype=np.intp))
    m_pos = np.asarray(m_pos, dtype=np.int64)

    # negatives share the positive's domain; sample the two groups separately
    m_neg_k = min(n_a, n_b)
    m_neg = np.zeros((m_pos.size, m_neg_k), dtype=np.int64)
    is_a = m_pos <= boundary
    m_neg[is_a] = _sample_negative_matrix(catalog_a, m_pos[is_a], m_neg_k, rng)
    m_neg[~is_a] = _sample_negative_matrix(catalog_b, m_pos[~is_a], m_neg_k, rng)

    def domain_positions(flag_value, items, catalog, k):
        rows, cols, pos = [], [], []
        for i in range(b):
            slots = np.nonzero(flags[i] == flag_value)[0]
            for j in range(len(slots) - 1):
                rows.append(i)
                cols.append(slots[j])
                pos.append(items[i, slots[j + 1]])
        index = (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))
        pos = np.asarray(pos, dtype=np.int64)
        neg = _sample_negative_matrix(catalog, pos, k, rng)
        return index, pos, neg

    a_index, a_pos, a_neg = domain_positions(datamod.FLAG_A, items_a, catalog_a, n_a)
    b_index, b_pos, b_neg = domain_positions(datamod.FLAG_B, items_b, catalog_b, n_b)
    return TrainingBatch(items_m, items_a, items_b, flags,
                         m_index, m_pos, m_neg,
                         a_index, a_pos, a_neg,
                         b_index, b_pos, b_neg)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CrossDomainRecommender
    log_rows: list[dict]
    best_epoch: int
    best_metric: float
    stopped_epoch: int
    checkpoint_path: str | None = None


def _epoch_rng(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, purpose])


def _aggregate_mrr(report: dict) -> float:
    values = [m["mrr"] for m in report.values() if m is not None]
    return float(np.mean(values)) if values else 0.0


def train(dataset: PreparedData, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Full training run with validation-driven early stopping.

    Pseudo sequences (and with them the router prior) are regenerated each
    epoch; the best checkpoint by aggregate validation MRR is restored at the
    end. ``resume`` restarts from a checkpoint written with
    ``checkpoint_every`` set.
    """
    cfg.validate()
    model_cfg.validate()
    ad.set_default_dtype(np.float64 if cfg.precision == "double" else np.float32)
    weights = cfg.loss_weights()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir is not None else None

    sched = ScheduleState(cfg.lr, cfg.warmup_epochs, cfg.lr_decay_factor)
    start_epoch = 0
    best_metric = -np.inf
    best_epoch = -1
    epochs_since = 0
    best_snapshot = None
    log_rows: list[dict] = []

    if resume is not None:
        model, header, extras = load_checkpoint(resume)
        opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        opt.load_state_arrays({k[len("opt:"):]: v for k, v in extras.items()
                               if k.startswith("opt:")})
        best_snapshot = {k[len("best:"):]: v for k, v in extras.items()
                         if k.startswith("best:")} or None
        start_epoch = header["epoch"] + 1
        best_metric = header["best_metric"]
        best_epoch = header["best_epoch"]
        epochs_since = header["epochs_since"]
        sched.n_decays = header["n_decays"]
        log_rows = list(header.get("log_rows", []))
    else:
        model = CrossDomainRecommender(model_cfg, seed=cfg.seed)
        opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def write_checkpoint(epoch: int) -> str:
        path = out_dir / "checkpoint.npz"
        extra = {f"opt:{k}": v for k, v in opt.state_arrays().items()}
        if best_snapshot is not None:
            extra.update({f"best:{k}": v for k, v in best_snapshot.items()})
        save_checkpoint(path, model, extra_header={
            "epoch": epoch, "best_metric": float(best_metric),
            "best_epoch": best_epoch, "epochs_since": epochs_since,
            "n_decays": sched.n_decays, "train_config": asdict(cfg),
            "log_rows": log_rows,
        }, extra_arrays=extra)
        return str(path)

    stopped_epoch = start_epoch
    for epoch in range(start_epoch, cfg.max_epochs):
        stopped_epoch = epoch
        lr = lr_schedule(epoch, sched)
        grl = grl_lambda_for_epoch(epoch, cfg)

        pseudo = generate_pseudo_sequences(
            dataset.log, cfg.n_pseudo, _epoch_rng(cfg.seed, epoch, _RNG_PSEUDO),
            dataset.max_len,
        )
        priors = (estimate_router_priors(model, pseudo)
                  if model.flags.use_router and weights.lambda1 > 0 else None)

        order = _epoch_rng(cfg.seed, epoch, _RNG_SHUFFLE).permutation(len(dataset.splits))
        neg_rng = _epoch_rng(cfg.seed, epoch, _RNG_NEGATIVES)
        fwd_rng = _epoch_rng(cfg.seed, epoch, _RNG_FORWARD)

        sums: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [dataset.splits[i].train for i in order[lo:lo + cfg.batch_size]]
            batch = build_training_batch(chunk, dataset.catalog_a, dataset.catalog_b,
                                         cfg.n_neg, neg_rng)
            bundle = model.forward(batch.items_m, batch.items_a, batch.items_b,
                                   batch.flags, train=True, rng=fwd_rng)
            total, report = compute_losses(model, bundle, batch, weights, priors, grl)
            if not np.isfinite(report.total):
                raise RuntimeError(
                    f"divergence: non-finite total loss at epoch {epoch} "
                    f"(components: {report.to_dict()})"
                )
            model.zero_grad()
            total.backward()
            clip_gradients(model.parameters(), cfg.clip_norm)
            opt.step(lr)
            n_batches += 1
            for key, value in report.to_dict().items():
                sums[key] = sums.get(key, 0.0) + value

        val = evaluation.evaluate(model, dataset, which="valid", mode=cfg.eval_mode,
                                  n_candidates=cfg.eval_candidates, seed=cfg.seed)
        agg = _aggregate_mrr(val)

        row = {"epoch": epoch, "lr": lr, "grl_lambda": grl,
               "val_mrr_agg": agg,
               "val_mrr_a": None if val["A"] is None else val["A"]["mrr"],
               "val_mrr_b": None if val["B"] is None else val["B"]["mrr"]}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        log_rows.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")

        if agg > best_metric:
            best_metric = agg
            best_epoch = epoch
            epochs_since = 0
            best_snapshot = model.snapshot()
        else:
            epochs_since += 1
            if epochs_since % cfg.lr_decay_patience == 0:
                sched.n_decays += 1

        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                and out_dir is not None:
            write_checkpoint(epoch)
        if epochs_since >= cfg.patience:
            break

    if best_snapshot is not None:
        model.load_snapshot(best_snapshot)
    ckpt = None
    if out_dir is not None:
        ckpt = write_checkpoint(stopped_epoch)
    return TrainResult(model=model, log_rows=log_rows, best_epoch=best_epoch,
                       best_metric=float(best_metric), stopped_epoch=stopped_epoch,
                       checkpoint_path=ckpt)


def run_seeds(dataset: PreparedData, model_cfg: ModelConfig, cfg: TrainConfig,
              k_seeds: int | None = None,
              out_dir: str | Path | None = None) -> dict:
    """k independent train+test runs with seeds seed, seed+1, ...

    Returns per-seed test reports plus mean and sample std per metric.
    """
    k = cfg.n_seeds if k_seeds is None else k_seeds
    if k < 1:
        raise ValueError("need at least one seed")
    per_seed = []
    for offset in range(k):
        run_cfg = replace(cfg, seed=cfg.seed + offset)
        run_dir = None if out_dir is None else Path(out_dir) / f"seed{run_cfg.seed}"
        result = train(dataset, model_cfg, run_cfg, out_dir=run_dir)
        report = evaluation.evaluate(result.model, dataset, which="test",
                                     mode=cfg.eval_mode,
                                     n_candidates=cfg.eval_candidates,
                                     seed=run_cfg.seed)
        per_seed.append({"seed": run_cfg.seed, "report": report,
                         "best_epoch": result.best_epoch,
                         "best_val_mrr": result.best_metric})
    return {"per_seed": per_seed,
            "aggregate": evaluation.aggregate_reports([s["report"] for s in per_seed])}
