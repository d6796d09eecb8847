"""Dual-domain interaction logs and everything done to them before training.

Covers file ingestion (CSV / JSON-lines, optionally gzipped), the
preprocessing and leave-one-out protocol, aligned sequence triples over one
global timeline, negative and pseudo-sequence sampling, the overlap-masking
and noise-injection perturbations used by the robustness harness, and a
synthetic generator with known causal structure (context chain -> latent
preferences -> items) for verifying disentanglement claims end to end.

All randomized operations take an explicit numpy Generator and are
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
DOMAIN_A = "A"
DOMAIN_B = "B"
FLAG_PAD = 0
FLAG_A = 1
FLAG_B = 2
_FLAG_OF = {DOMAIN_A: FLAG_A, DOMAIN_B: FLAG_B}


class IngestError(ValueError):
    """Malformed input rows above the tolerated fraction, or corrupt structure."""


class EmptyDatasetError(ValueError):
    """Preprocessing removed every user."""


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    domain: str
    timestamp: int


@dataclass
class InteractionLog:
    """Per-user chronological histories plus the two item catalogs.

    Histories are sorted by timestamp with ties broken by ingestion order;
    catalogs are disjoint id sets (0 is reserved for padding).
    """

    by_user: dict[int, list[Interaction]]
    catalog_a: set[int]
    catalog_b: set[int]

    @property
    def users(self) -> list[int]:
        return sorted(self.by_user)

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.by_user.values())

    def domain_of(self, item_id: int) -> str:
        if item_id in self.catalog_a:
            return DOMAIN_A
        if item_id in self.catalog_b:
            return DOMAIN_B
        raise KeyError(f"item {item_id} in neither catalog")


@dataclass
class AlignedSequenceTriple:
    """One global timeline holding the mixed sequence and its two projections.

    ``items_m`` is the merged chronological history left-padded to length T;
    ``items_a`` / ``items_b`` are the same timeline with the other domain's
    slots replaced by PAD. ``domain_flags`` marks each slot PAD/A/B.
    """

    user_id: int
    items_m: np.ndarray
    items_a: np.ndarray
    items_b: np.ndarray
    domain_flags: np.ndarray
    valid_len: int

    @property
    def max_len(self) -> int:
        return int(self.items_m.shape[0])

    def events(self) -> list[tuple[int, str]]:
        """Non-PAD (item, domain) pairs in chronological order."""
        out = []
        for item, flag in zip(self.items_m, self.domain_flags):
            if flag == FLAG_A:
                out.append((int(item), DOMAIN_A))
            elif flag == FLAG_B:
                out.append((int(item), DOMAIN_B))
        return out

    def check_invariants(self) -> None:
        T = self.max_len
        assert self.items_a.shape == (T,) and self.items_b.shape == (T,)
        assert self.domain_flags.shape == (T,)
        pad_len = T - self.valid_len
        assert np.all(self.domain_flags[:pad_len] == FLAG_PAD), "left padding violated"
        assert np.all(self.domain_flags[pad_len:] != FLAG_PAD), "gap inside timeline"
        assert np.all((self.items_m == PAD) == (self.domain_flags == FLAG_PAD))
        assert np.all((self.items_a != PAD) == (self.domain_flags == FLAG_A))
        assert np.all((self.items_b != PAD) == (self.domain_flags == FLAG_B))
        a_slots = self.domain_flags == FLAG_A
        b_slots = self.domain_flags == FLAG_B
        assert np.array_equal(self.items_a[a_slots], self.items_m[a_slots])
        assert np.array_equal(self.items_b[b_slots], self.items_m[b_slots])


@dataclass
class SplitTriple:
    """Leave-one-out split: train timeline plus per-domain eval targets.

    A domain contributes targets only when the user has at least three
    interactions in it; the test target is the chronologically last item of
    that domain, the validation target the second-to-last.
    """

    user_id: int
    train: AlignedSequenceTriple
    valid_targets: dict[str, int]
    test_targets: dict[str, int]


@dataclass
class PseudoSequenceSet:
    sequences: list[AlignedSequenceTriple]

    @property
    def count(self) -> int:
        return len(self.sequences)


@dataclass
class SyntheticSpec:
    """Knobs of the causal generator (context chain -> latents -> items).

    ``context_strength`` scales every causal path out of the context variable
    (shift of the latent means and the direct per-step emission effect);
    setting it to 0 makes item emissions independent of context.
    """

    n_users: int = 200
    n_items_a: int = 50
    n_items_b: int = 50
    n_contexts: int = 3
    transition: np.ndarray | None = None
    shared_dim: int = 8
    specific_dim: int = 4
    min_len: int = 12
    max_len: int = 20
    context_strength: float = 1.0
    emission_sharpness: float = 3.0
    seed: int = 0

    def resolved_transition(self) -> np.ndarray:
        if self.transition is None:
            # sticky chain: stay with prob 0.8, move uniformly otherwise
            c = self.n_contexts
            t = np.full((c, c), 0.2 / max(c - 1, 1))
            np.fill_diagonal(t, 0.8 if c > 1 else 1.0)
            return t
        return np.asarray(self.transition, dtype=float)

    def validate(self) -> None:
        if min(self.n_users, self.n_items_a, self.n_items_b, self.n_contexts) <= 0:
            raise ValueError("counts must be positive")
        if min(self.shared_dim, self.specific_dim) <= 0:
            raise ValueError("latent dims must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad sequence length range")
        t = self.resolved_transition()
        if t.shape != (self.n_contexts, self.n_contexts):
            raise ValueError("transition matrix shape mismatch")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9) or t.min() < 0:
            raise ValueError("transition rows must lie on the simplex")


@dataclass
class CausalGroundTruth:
    """What the generator actually drew, for use as a test oracle."""

    contexts: dict[int, list[int]]
    shared_latents: dict[int, np.ndarray]
    specific_latents_a: dict[int, np.ndarray]
    specific_latents_b: dict[int, np.ndarray]
    spec: SyntheticSpec

    def to_json(self) -> str:
        payload = {
            "format": "crossseq-groundtruth",
            "version": 1,
            "spec": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in vars(self.spec).items()
            },
            "contexts": {str(u): c for u, c in self.contexts.items()},
            "shared_latents": {str(u): z.tolist() for u, z in self.shared_latents.items()},
            "specific_latents_a": {
                str(u): z.tolist() for u, z in self.specific_latents_a.items()
            },
            "specific_latents_b": {
                str(u): z.tolist() for u, z in self.specific_latents_b.items()
            },
        }
        return json.dumps(payload)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_CSV_HEADER = ("user", "item", "domain", "timestamp")


def _parse_record(raw) -> Interaction:
    user, item, domain, ts = raw
    user, item, ts = int(user), int(item), int(ts)
    domain = str(domain).strip().upper()
    if domain not in (DOMAIN_A, DOMAIN_B):
        raise ValueError(f"unknown domain tag {domain!r}")
    if item == PAD:
        raise ValueError("item id 0 is reserved for padding")
    if ts < 0:
        raise ValueError("negative timestamp")
    return Interaction(user, item, domain, ts)


def ingest(records: Iterable, max_bad_fraction: float = 0.01) -> InteractionLog:
    """Build an InteractionLog from (user, item, domain, timestamp) rows.

    Rows failing to parse are collected with their 1-based position; the run
    aborts once more than ``max_bad_fraction`` of the rows are bad. Exact
    duplicates (same user/item/timestamp) are kept once. An item appearing
    under both domain tags is a structural error.
    """
    parsed: list[Interaction] = []
    bad: list[tuple[int, str]] = []
    total = 0
    for lineno, raw in enumerate(records, start=1):
        total += 1
        try:
            parsed.append(_parse_record(raw))
        except (ValueError, TypeError) as exc:
            bad.append((lineno, str(exc)))
    if total and len(bad) / total > max_bad_fraction:
        head = "; ".join(f"line {ln}: {msg}" for ln, msg in bad[:5])
        raise IngestError(
            f"{len(bad)}/{total} rows failed to parse (> {max_bad_fraction:.0%}): {head}"
        )
    if bad:
        log.warning("ingest: skipped %d/%d bad rows (first: line %d: %s)",
                    len(bad), total, bad[0][0], bad[0][1])

    catalog_a: set[int] = set()
    catalog_b: set[int] = set()
    for it in parsed:
        (catalog_a if it.domain == DOMAIN_A else catalog_b).add(it.item_id)
    overlap = catalog_a & catalog_b
    if overlap:
        raise IngestError(f"items tagged with both domains: {sorted(overlap)[:5]}")

    by_user: dict[int, list[Interaction]] = {}
    seen: set[tuple[int, int, int]] = set()
    for it in parsed:
        key = (it.user_id, it.item_id, it.timestamp)
        if key in seen:
            continue
        seen.add(key)
        by_user.setdefault(it.user_id, []).append(it)
    for hist in by_user.values():
        hist.sort(key=lambda it: it.timestamp)  # stable: ties keep ingestion order
    return InteractionLog(by_user, catalog_a, catalog_b)


def _open_text(path) -> io.TextIOBase:
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _iter_csv(fh) -> Iterator[tuple]:
    reader = csv.reader(fh)
    for i, row in enumerate(reader):
        if i == 0 and [c.strip().lower() for c in row] == list(_CSV_HEADER):
            continue
        yield tuple(row) if len(row) == 4 else tuple(row) + ("",) * (4 - len(row))


def _iter_jsonl(fh) -> Iterator[tuple]:
    for line in fh:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            yield (obj["user"], obj["item"], obj["domain"], obj["timestamp"])
        except (json.JSONDecodeError, KeyError, TypeError):
            yield ("<unparseable>",) * 4


def read_interaction_file(path, max_bad_fraction: float = 0.01) -> InteractionLog:
    """Load a CSV or JSON-lines interaction file (``.gz`` accepted)."""
    name = str(path)
    stem = name[:-3] if name.endswith(".gz") else name
    with _open_text(path) as fh:
        if stem.endswith(".csv"):
            rows = _iter_csv(fh)
        elif stem.endswith((".jsonl", ".json", ".ndjson")):
            rows = _iter_jsonl(fh)
        else:
            raise IngestError(f"unrecognized interaction file extension: {name}")
        return ingest(rows, max_bad_fraction=max_bad_fraction)


def save_log(logdata: InteractionLog, path) -> None:
    """Write a log as versioned JSON-lines (gzipped when path ends in .gz)."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        header = {
            "format": "crossseq-log",
            "version": 1,
            "catalog_a": sorted(logdata.catalog_a),
            "catalog_b": sorted(logdata.catalog_b),
        }
        fh.write(json.dumps(header) + "\n")
        for user in sorted(logdata.by_user):
            for it in logdata.by_user[user]:
                fh.write(json.dumps({
                    "user": it.user_id, "item": it.item_id,
                    "domain": it.domain, "timestamp": it.timestamp,
                }) + "\n")


def load_log(path) -> InteractionLog:
    with _open_text(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "crossseq-log":
            raise IngestError("not a crossseq log cache")
        loaded = ingest(_iter_jsonl(fh))
        if "catalog_a" in header:
            # the cached catalogs are the item space, which may exceed the
            # observed set (synthetic data, masked logs)
            loaded.catalog_a = set(header["catalog_a"])
            loaded.catalog_b = set(header["catalog_b"])
        return loaded


def build_id_maps(records: Iterable[tuple]) -> tuple[dict, dict]:
    """Dense integer ids for raw corpora with arbitrary user/item keys.

    Items are numbered 1.. with domain-A items first, each domain sorted by
    raw key; users are numbered 0.. sorted by raw key. Returns
    (user_map, item_map).
    """
    users, items_a, items_b = set(), set(), set()
    for user, item, domain, _ts in records:
        users.add(user)
        d = str(domain).strip().upper()
        (items_a if d == DOMAIN_A else items_b).add(item)
    user_map = {u: i for i, u in enumerate(sorted(users, key=str))}
    item_map: dict = {}
    next_id = 1
    for pool in (sorted(items_a, key=str), sorted(items_b, key=str)):
        for raw in pool:
            item_map[raw] = next_id
            next_id += 1
    return user_map, item_map


# ---------------------------------------------------------------------------
# preprocessing and splitting
# ---------------------------------------------------------------------------


def _user_domains(hist: Sequence[Interaction]) -> set[str]:
    return {it.domain for it in hist}


def preprocess(logdata: InteractionLog, min_item_count: int = 5,
               max_history: int = 50) -> InteractionLog:
    """Apply the dataset filtering protocol.

    (1) keep only users active in both domains; (2) iteratively drop items
    with fewer than ``min_item_count`` interactions until stable; (3)
    truncate each user's merged history to the ``max_history`` most recent
    actions and re-check dual-domain membership.
    """
    by_user = {u: list(h) for u, h in logdata.by_user.items()
               if _user_domains(h) == {DOMAIN_A, DOMAIN_B}}

    while True:
        counts: dict[int, int] = {}
        for hist in by_user.values():
            for it in hist:
                counts[it.item_id] = counts.get(it.item_id, 0) + 1
        weak = {item for item, c in counts.items() if c < min_item_count}
        if not weak:
            break
        by_user = {u: [it for it in h if it.item_id not in weak]
                   for u, h in by_user.items()}
        by_user = {u: h for u, h in by_user.items() if h}

    by_user = {u: h[-max_history:] for u, h in by_user.items()}
    by_user = {u: h for u, h in by_user.items()
               if _user_domains(h) == {DOMAIN_A, DOMAIN_B}}
    if not by_user:
        raise EmptyDatasetError("preprocessing produced an empty dataset")

    catalog_a = {it.item_id for h in by_user.values() for it in h if it.domain == DOMAIN_A}
    catalog_b = {it.item_id for h in by_user.values() for it in h if it.domain == DOMAIN_B}
    return InteractionLog(by_user, catalog_a, catalog_b)


def triple_from_events(user_id: int, events: Sequence[tuple[int, str]],
                        T: int) -> AlignedSequenceTriple:
    events = list(events)[-T:]
    n = len(events)
    items_m = np.zeros(T, dtype=np.int64)
    flags = np.zeros(T, dtype=np.int8)
    for i, (item, domain) in enumerate(events):
        slot = T - n + i
        items_m[slot] = item
        flags[slot] = _FLAG_OF[domain]
    items_a = np.where(flags == FLAG_A, items_m, PAD)
    items_b = np.where(flags == FLAG_B, items_m, PAD)
    return AlignedSequenceTriple(user_id, items_m, items_a, items_b, flags, n)


def build_aligned_sequences(logdata: InteractionLog, T: int) -> list[AlignedSequenceTriple]:
    """One left-padded aligned triple per user (histories truncated to T)."""
    return [
        triple_from_events(u, [(it.item_id, it.domain) for it in logdata.by_user[u]], T)
        for u in logdata.users
    ]


def leave_one_out_split(triples: Sequence[AlignedSequenceTriple]) -> list[SplitTriple]:
    """Last item per domain -> test, second-to-last -> validation.

    Domains with fewer than three interactions keep everything in train and
    produce no targets. Removed slots are re-compacted to the left.
    """
    out = []
    for triple in triples:
        events = triple.events()
        valid_targets: dict[str, int] = {}
        test_targets: dict[str, int] = {}
        drop: set[int] = set()
        for domain in (DOMAIN_A, DOMAIN_B):
            positions = [i for i, (_item, d) in enumerate(events) if d == domain]
            if len(positions) >= 3:
                test_targets[domain] = events[positions[-1]][0]
                valid_targets[domain] = events[positions[-2]][0]
                drop.update(positions[-2:])
        remaining = [ev for i, ev in enumerate(events) if i not in drop]
        train = triple_from_events(triple.user_id, remaining, triple.max_len)
        out.append(SplitTriple(triple.user_id, train, valid_targets, test_targets))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_negatives(catalog, positive_item: int, n_neg: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``n_neg`` distinct items from the positive's own catalog, excluding it."""
    items = np.asarray(sorted(catalog), dtype=np.int64)
    pool = items[items != positive_item]
    if n_neg > pool.size:
        raise ValueError(
            f"cannot draw {n_neg} negatives from a catalog of {items.size} items"
        )
    return rng.choice(pool, size=n_neg, replace=False)


def empirical_length_distribution(logdata: InteractionLog, T: int) -> np.ndarray:
    """Histogram over merged-history lengths (clipped to T), normalized."""
    lengths = np.array([min(len(h), T) for h in logdata.by_user.values()])
    hist = np.bincount(lengths, minlength=T + 1).astype(float)
    return hist / hist.sum()


def generate_pseudo_sequences(logdata: InteractionLog, V: int,
                              rng: np.random.Generator, T: int) -> PseudoSequenceSet:
    """V random aligned triples used to estimate the router prior.

    Lengths are resampled from the log's empirical merged-length
    distribution; each slot's domain follows the log's overall A/B
    interaction fraction, and items are uniform over that domain's catalog.
    """
    if V < 1:
        raise ValueError("V must be >= 1")
    length_p = empirical_length_distribution(logdata, T)
    items_a = np.asarray(sorted(logdata.catalog_a), dtype=np.int64)
    items_b = np.asarray(sorted(logdata.catalog_b), dtype=np.int64)
    n_a = sum(1 for h in logdata.by_user.values() for it in h if it.domain == DOMAIN_A)
    n_total = logdata.n_interactions
    frac_a = n_a / n_total if n_total else 0.5

    sequences = []
    for j in range(V):
        length = int(rng.choice(length_p.size, p=length_p))
        length = max(length, 1)
        events = []
        for _t in range(length):
            if rng.random() < frac_a:
                events.append((int(rng.choice(items_a)), DOMAIN_A))
            else:
                events.append((int(rng.choice(items_b)), DOMAIN_B))
        sequences.append(triple_from_events(-1 - j, events, T))
    return PseudoSequenceSet(sequences)


# ---------------------------------------------------------------------------
# robustness perturbations
# ---------------------------------------------------------------------------


def mask_overlap(logdata: InteractionLog, ratio: float,
                 rng: np.random.Generator) -> InteractionLog:
    """Delete one randomly chosen domain's interactions for floor(ratio*|U|) users.

    Applies to whatever log it is given; the sweep driver feeds it the
    training portion only so evaluation targets stay untouched. Catalogs are
    preserved (they define the item space, not the observed set).
    """
    if not 0.0 <= ratio <= 0.8:
        raise ValueError(f"overlap mask ratio must be in [0, 0.8], got {ratio}")
    users = sorted(logdata.by_user)
    n_masked = int(np.floor(ratio * len(users)))
    chosen = rng.choice(len(users), size=n_masked, replace=False) if n_masked else []
    masked_users = {users[i] for i in np.sort(np.asarray(chosen, dtype=int))}

    by_user = {}
    for u in users:
        hist = logdata.by_user[u]
        if u in masked_users:
            domain = DOMAIN_A if rng.random() < 0.5 else DOMAIN_B
            hist = [it for it in hist if it.domain != domain]
        by_user[u] = list(hist)
    return InteractionLog(by_user, set(logdata.catalog_a), set(logdata.catalog_b))


def inject_noise(triple: AlignedSequenceTriple, k: int, rng: np.random.Generator,
                 catalog_a, catalog_b) -> AlignedSequenceTriple:
    """Splice k random items at random timeline positions.

    Each inserted item picks its domain uniformly and its id uniformly from
    that domain's catalog; original items keep their relative order. The
    result is truncated back to T from the left (oldest slots dropped).
    """
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    items_a = np.asarray(sorted(catalog_a), dtype=np.int64)
    items_b = np.asarray(sorted(catalog_b), dtype=np.int64)
    events = triple.events()
    for _ in range(k):
        if rng.random() < 0.5:
            ev = (int(rng.choice(items_a)), DOMAIN_A)
        else:
            ev = (int(rng.choice(items_b)), DOMAIN_B)
        pos = int(rng.integers(0, len(events) + 1))
        events.insert(pos, ev)
    return triple_from_events(triple.user_id, events, triple.max_len)


# ---------------------------------------------------------------------------
# synthetic causal generator
# ---------------------------------------------------------------------------


def synthesize_causal(spec: SyntheticSpec) -> tuple[InteractionLog, CausalGroundTruth]:
    """Sample a dataset whose generating process is known.

    Per user: a Markov context chain; one shared and two domain-specific
    latents drawn around context-conditioned means; each step flips a fair
    coin for the domain and emits an item via a softmax over that domain's
    item factors scored by (shared + specific + context) contributions.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    transition = spec.resolved_transition()
    strength = spec.context_strength

    def item_factors(n_items):
        shared = rng.standard_normal((n_items, spec.shared_dim)) / np.sqrt(spec.shared_dim)
        specific = rng.standard_normal((n_items, spec.specific_dim)) / np.sqrt(spec.specific_dim)
        ctx = rng.standard_normal((n_items, spec.n_contexts))
        return shared, specific, ctx

    shared_a, specific_a, ctx_a = item_factors(spec.n_items_a)
    shared_b, specific_b, ctx_b = item_factors(spec.n_items_b)
    mean_sha = rng.standard_normal((spec.n_contexts, spec.shared_dim))
    mean_a = rng.standard_normal((spec.n_contexts, spec.specific_dim))
    mean_b = rng.standard_normal((spec.n_contexts, spec.specific_dim))

    by_user: dict[int, list[Interaction]] = {}
    contexts: dict[int, list[int]] = {}
    z_sha_all: dict[int, np.ndarray] = {}
    z_a_all: dict[int, np.ndarray] = {}
    z_b_all: dict[int, np.ndarray] = {}

    for user in range(spec.n_users):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        chain = [int(rng.integers(spec.n_contexts))]
        for _ in range(length - 1):
            chain.append(int(rng.choice(spec.n_contexts, p=transition[chain[-1]])))

        c0 = chain[0]
        z_sha = strength * mean_sha[c0] + rng.standard_normal(spec.shared_dim)
        z_a = strength * mean_a[c0] + rng.standard_normal(spec.specific_dim)
        z_b = strength * mean_b[c0] + rng.standard_normal(spec.specific_dim)

        hist = []
        for t, c in enumerate(chain):
            if rng.random() < 0.5:
                scores = shared_a @ z_sha + specific_a @ z_a + strength * ctx_a[:, c]
                logits = spec.emission_sharpness * scores
                logits -= logits.max()
                p = np.exp(logits)
                p /= p.sum()
                item = 1 + int(rng.choice(spec.n_items_a, p=p))
                domain = DOMAIN_A
            else:
                scores = shared_b @ z_sha + specific_b @ z_b + strength * ctx_b[:, c]
                logits = spec.emission_sharpness * scores
                logits -= logits.max()
                p = np.exp(logits)
                p /= p.sum()
                item = 1 + spec.n_items_a + int(rng.choice(spec.n_items_b, p=p))
                domain = DOMAIN_B
            hist.append(Interaction(user, item, domain, t))

        by_user[user] = hist
        contexts[user] = chain
        z_sha_all[user] = z_sha
        z_a_all[user] = z_a
        z_b_all[user] = z_b

    catalog_a = set(range(1, spec.n_items_a + 1))
    catalog_b = set(range(spec.n_items_a + 1, spec.n_items_a + spec.n_items_b + 1))
    truth = CausalGroundTruth(contexts, z_sha_all, z_a_all, z_b_all, spec)
    return InteractionLog(by_user, catalog_a, catalog_b), truth


# ---------------------------------------------------------------------------
# packaging for the model
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Densified log, aligned triples, and leave-one-out splits in one place."""

    log: InteractionLog
    triples: list[AlignedSequenceTriple]
    splits: list[SplitTriple]
    max_len: int
    catalog_a: np.ndarray
    catalog_b: np.ndarray
    id_map: dict[int, int] = field(repr=False, default_factory=dict)

    @property
    def n_items_a(self) -> int:
        return int(self.catalog_a.size)

    @property
    def n_items_b(self) -> int:
        return int(self.catalog_b.size)

    @property
    def n_users(self) -> int:
        return len(self.splits)


def densify_log(logdata: InteractionLog) -> tuple[InteractionLog, dict[int, int]]:
    """Remap items into the unified space 1..|A|+|B| (A first, sorted by id)."""
    id_map: dict[int, int] = {}
    for i, item in enumerate(sorted(logdata.catalog_a), start=1):
        id_map[item] = i
    offset = len(logdata.catalog_a)
    for i, item in enumerate(sorted(logdata.catalog_b), start=1):
        id_map[item] = offset + i
    by_user = {
        u: [Interaction(it.user_id, id_map[it.item_id], it.domain, it.timestamp)
            for it in hist]
        for u, hist in logdata.by_user.items()
    }
    catalog_a = {id_map[i] for i in logdata.catalog_a}
    catalog_b = {id_map[i] for i in logdata.catalog_b}
    return InteractionLog(by_user, catalog_a, catalog_b), id_map


def prepare(logdata: InteractionLog, max_len: int) -> PreparedData:
    """Densify ids, build aligned triples, and split leave-one-out."""
    dense, id_map = densify_log(logdata)
    triples = build_aligned_sequences(dense, max_len)
    splits = leave_one_out_split(triples)
    return PreparedData(
        log=dense,
        triples=triples,
        splits=splits,
        max_len=max_len,
        catalog_a=np.asarray(sorted(dense.catalog_a), dtype=np.int64),
        catalog_b=np.asarray(sorted(dense.catalog_b), dtype=np.int64),
        id_map=id_map,
    )
