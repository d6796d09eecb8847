"""Leave-one-out ranking protocol, metrics, and representation exports.

Ranks are pessimistic under ties (tied candidates count as scoring higher),
PAD is never a candidate, and full-catalog mode filters the user's own
training items of the evaluated domain unless disabled. The evaluation-time
query matches the training one: F_spec + F_sha at the last valid position of
the domain's stream, falling back to the last merged-stream position for
users with no training history in that domain.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from crossseq.data import (
    DOMAIN_A,
    DOMAIN_B,
    FLAG_A,
    FLAG_B,
    FLAG_PAD,
    PreparedData,
)
from crossseq.model import CrossDomainRecommender

METRIC_NAMES = ("hr5", "hr10", "ndcg5", "ndcg10", "mrr")


# ---------------------------------------------------------------------------
# rank-level metrics
# ---------------------------------------------------------------------------


def rank_items(query: np.ndarray, item_ids: np.ndarray, item_embs: np.ndarray,
               target_id: int, exclude: Iterable[int] = ()) -> int:
    """1-based rank of the target among the candidate items by inner product.

    ``exclude`` drops candidates (never the target itself); ties count
    against the target.
    """
    item_ids = np.asarray(item_ids)
    pos = np.nonzero(item_ids == target_id)[0]
    if pos.size == 0:
        raise ValueError(f"target item {target_id} not among the candidates")
    scores = item_embs @ query
    target_score = scores[pos[0]]
    excluded = set(exclude) - {target_id}
    if excluded:
        keep = ~np.isin(item_ids, list(excluded))
        scores = scores[keep]
        item_ids = item_ids[keep]
    higher = int((scores > target_score).sum())
    tied = int(((scores == target_score) & (item_ids != target_id)).sum())
    return 1 + higher + tied


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the cutoff."""
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


def mrr(rank: int) -> float:
    return 1.0 / rank


def metrics_from_rank(rank: int) -> dict[str, float]:
    return {
        "hr5": hr_at_k(rank, 5),
        "hr10": hr_at_k(rank, 10),
        "ndcg5": ndcg_at_k(rank, 5),
        "ndcg10": ndcg_at_k(rank, 10),
        "mrr": mrr(rank),
    }


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------


def _query_position(flags_row: np.ndarray, domain_flag: int) -> int | None:
    """Last slot of the domain's stream, else last non-PAD slot, else None."""
    own = np.nonzero(flags_row == domain_flag)[0]
    if own.size:
        return int(own[-1])
    any_valid = np.nonzero(flags_row != FLAG_PAD)[0]
    return int(any_valid[-1]) if any_valid.size else None


def _candidate_ids(catalog: np.ndarray, target: int, mode: str, n_candidates: int,
                   rng: np.random.Generator) -> np.ndarray:
    if mode == "full":
        return catalog
    if mode == "sampled":
        pool = catalog[catalog != target]
        k = min(n_candidates - 1, pool.size)
        sampled = rng.choice(pool, size=k, replace=False)
        return np.concatenate([[target], sampled])
    raise ValueError(f"unknown eval mode {mode!r}")


def evaluate(model: CrossDomainRecommender, dataset: PreparedData,
             which: str = "test", mode: str = "full", n_candidates: int = 100,
             filter_train_items: bool = True, seed: int = 0,
             batch_size: int = 256) -> dict:
    """Rank the held-out target per user per domain and average the metrics.

    Returns ``{"A": {...metrics..., "count": n} | None, "B": ...}``; a domain
    with no targets reports None rather than zeros.
    """
    if which not in ("test", "valid"):
        raise ValueError("which must be 'test' or 'valid'")
    emb = model.params["item_emb"].values
    sums = {DOMAIN_A: dict.fromkeys(METRIC_NAMES, 0.0),
            DOMAIN_B: dict.fromkeys(METRIC_NAMES, 0.0)}
    counts = {DOMAIN_A: 0, DOMAIN_B: 0}
    catalogs = {DOMAIN_A: dataset.catalog_a, DOMAIN_B: dataset.catalog_b}
    flags_of = {DOMAIN_A: FLAG_A, DOMAIN_B: FLAG_B}

    for lo in range(0, len(dataset.splits), batch_size):
        batch = dataset.splits[lo:lo + batch_size]
        bundle = model.forward_triples([s.train for s in batch], train=False)
        f_sha = bundle.f_sha.values
        f_spec = {DOMAIN_A: bundle.f_spec_a.values, DOMAIN_B: bundle.f_spec_b.values}
        for i, split in enumerate(batch):
            targets = split.test_targets if which == "test" else split.valid_targets
            for domain, target in targets.items():
                pos = _query_position(split.train.domain_flags, flags_of[domain])
                if pos is None:
                    continue
                query = f_spec[domain][i, pos] + f_sha[i, pos]
                rng = np.random.default_rng([seed, split.user_id])
                ids = _candidate_ids(catalogs[domain], target, mode, n_candidates, rng)
                exclude: set[int] = set()
                if mode == "full" and filter_train_items:
                    exclude = {item for item, d in split.train.events() if d == domain}
                rank = rank_items(query, ids, emb[ids], target, exclude)
                for name, value in metrics_from_rank(rank).items():
                    sums[domain][name] += value
                counts[domain] += 1

    report: dict = {}
    for domain in (DOMAIN_A, DOMAIN_B):
        if counts[domain] == 0:
            report[domain] = None
        else:
            report[domain] = {k: v / counts[domain] for k, v in sums[domain].items()}
            report[domain]["count"] = counts[domain]
    return report


def popularity_baseline(dataset: PreparedData, which: str = "test") -> dict:
    """Rank every catalog item by training interaction count (ties by id)."""
    counts: dict[int, int] = {}
    for split in dataset.splits:
        for item, _d in split.train.events():
            counts[item] = counts.get(item, 0) + 1
    report: dict = {}
    for domain, catalog in ((DOMAIN_A, dataset.catalog_a), (DOMAIN_B, dataset.catalog_b)):
        order = sorted(catalog.tolist(), key=lambda i: (-counts.get(i, 0), i))
        rank_of = {item: r + 1 for r, item in enumerate(order)}
        sums = dict.fromkeys(METRIC_NAMES, 0.0)
        n = 0
        for split in dataset.splits:
            targets = split.test_targets if which == "test" else split.valid_targets
            if domain in targets:
                for name, value in metrics_from_rank(rank_of[targets[domain]]).items():
                    sums[name] += value
                n += 1
        report[domain] = None if n == 0 else {**{k: v / n for k, v in sums.items()},
                                              "count": n}
    return report


def aggregate_reports(reports: Sequence[Mapping]) -> dict:
    """Per-domain mean and sample std over seed reports (std 0 for one seed)."""
    out: dict = {}
    for domain in (DOMAIN_A, DOMAIN_B):
        rows = [r[domain] for r in reports if r.get(domain) is not None]
        if not rows:
            out[domain] = None
            continue
        out[domain] = {}
        for name in METRIC_NAMES:
            values = np.array([row[name] for row in rows])
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            out[domain][name] = {"mean": float(values.mean()), "std": std}
    return out


def format_mean_std(entry: Mapping[str, float], digits: int = 4) -> str:
    return f"{entry['mean']:.{digits}f} ± {entry['std']:.{digits}f}"


# ---------------------------------------------------------------------------
# representation exports and probes
# ---------------------------------------------------------------------------


def export_representations(model: CrossDomainRecommender, dataset: PreparedData,
                           users: Sequence[int] | None, out_dir) -> tuple[Path, Path]:
    """Write per-user representation rows and per-timestep router probabilities.

    representations.csv: (user, kind, v0..v_{h-1}) for F_sha / F_spec_A /
    F_spec_B / E_M / E_A / E_B at each stream's last valid position.
    router_probs.csv: (user, t, context probabilities) over the merged stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = set(users) if users is not None else None
    splits = [s for s in dataset.splits if chosen is None or s.user_id in chosen]

    rep_path = out_dir / "representations.csv"
    router_path = out_dir / "router_probs.csv"
    hidden = model.config.hidden
    n_experts = model.config.n_experts

    with open(rep_path, "w", newline="") as rep_fh, \
            open(router_path, "w", newline="") as router_fh:
        rep = csv.writer(rep_fh)
        rep.writerow(["user", "kind"] + [f"v{i}" for i in range(hidden)])
        router = csv.writer(router_fh)
        router.writerow(["user", "t"] + [f"q{i}" for i in range(n_experts)])

        batch_size = 256
        for lo in range(0, len(splits), batch_size):
            batch = splits[lo:lo + batch_size]
            bundle = model.forward_triples([s.train for s in batch], train=False)
            kinds = {
                "F_sha": (bundle.f_sha.values, None),
                "F_spec_A": (bundle.f_spec_a.values, None),
                "F_spec_B": (bundle.f_spec_b.values, None),
                "E_M": (bundle.e_m.values, None),
                "E_A": (bundle.e_a.values, FLAG_A),
                "E_B": (bundle.e_b.values, FLAG_B),
            }
            q_m = bundle.router["M"].weights.values
            for i, split in enumerate(batch):
                flags_row = split.train.domain_flags
                for kind, (arr, domain_flag) in kinds.items():
                    if domain_flag is None:
                        own = np.nonzero(flags_row != FLAG_PAD)[0]
                        pos = int(own[-1]) if own.size else flags_row.size - 1
                    else:
                        found = _query_position(flags_row, domain_flag)
                        pos = found if found is not None else flags_row.size - 1
                    rep.writerow([split.user_id, kind] + arr[i, pos].tolist())
                for t in np.nonzero(flags_row != FLAG_PAD)[0]:
                    router.writerow([split.user_id, int(t)] + q_m[i, t].tolist())
    return rep_path, router_path


def domain_probe_dataset(model: CrossDomainRecommender, dataset: PreparedData,
                         batch_size: int = 256) -> dict[str, np.ndarray]:
    """Frozen per-position representations labeled by the slot's domain.

    The specific set pairs F_spec_A rows at A slots (label 0) with F_spec_B
    rows at B slots (label 1); the shared set is F_sha at the same slots with
    the same labels. A fresh classifier on the specific set should separate
    the domains; on the shared set it should not.
    """
    xs_spec, xs_sha, ys = [], [], []
    for lo in range(0, len(dataset.splits), batch_size):
        batch = dataset.splits[lo:lo + batch_size]
        bundle = model.forward_triples([s.train for s in batch], train=False)
        for i, split in enumerate(batch):
            flags_row = split.train.domain_flags
            for flag, spec_arr, label in ((FLAG_A, bundle.f_spec_a.values, 0),
                                          (FLAG_B, bundle.f_spec_b.values, 1)):
                slots = np.nonzero(flags_row == flag)[0]
                for t in slots:
                    xs_spec.append(spec_arr[i, t])
                    xs_sha.append(bundle.f_sha.values[i, t])
                    ys.append(label)
    return {
        "specific": np.asarray(xs_spec),
        "shared": np.asarray(xs_sha),
        "labels": np.asarray(ys, dtype=np.int64),
    }
