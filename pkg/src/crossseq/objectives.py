"""Training objectives: InfoNCE recommendation losses and the regularizers.

Six terms feed the weighted total: next-item InfoNCE on the merged timeline
(shared representation), gradient-isolated per-domain InfoNCE (specific +
stop-gradient(shared) queries), a categorical KL pinning router posteriors
to a pseudo-sequence prior, Gaussian KLs on the variational latents, and a
soft-label domain-classification loss through the discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from crossseq import autodiff as ad
from crossseq.autodiff import LOG_EPS, Tensor
from crossseq.data import PseudoSequenceSet
from crossseq.model import CrossDomainRecommender, RepresentationBundle

SOFT_LABELS = {"shared": 0.5, "specific_A": 0.0, "specific_B": 1.0}


@dataclass
class LossWeights:
    lambda1: float = 0.3   # router-prior KL
    lambda2: float = 0.1   # variational KL
    lambda3: float = 1.0   # adversarial
    tau: float = 0.75      # InfoNCE temperature

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    l_sha: float
    l_a: float
    l_b: float
    l_c: float
    l_var: float
    l_adv: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "l_sha": self.l_sha, "l_a": self.l_a, "l_b": self.l_b,
            "l_c": self.l_c, "l_var": self.l_var, "l_adv": self.l_adv,
            "total": self.total,
        }


def _zero() -> Tensor:
    return Tensor(0.0)


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def info_nce_rows(queries: Tensor, positives: Tensor, negatives: Tensor | None,
                  tau: float) -> Tensor:
    """Per-row InfoNCE losses for (P, h) queries.

    ``negatives`` is (P, K, h) or None for an empty negative set (loss 0).
    Log-sum-exp stabilized via log_softmax.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = queries.shape[0]
    pos_score = ad.reduce_sum(ad.multiply(queries, positives), axis=-1)
    logits = ad.reshape(pos_score, (p, 1))
    if negatives is not None and negatives.shape[1] > 0:
        q3 = ad.reshape(queries, (p, 1, queries.shape[-1]))
        neg_scores = ad.reduce_sum(ad.multiply(q3, negatives), axis=-1)
        logits = ad.concat([logits, neg_scores], axis=1)
    log_probs = ad.log_softmax(ad.multiply(logits, 1.0 / tau), axis=-1)
    return ad.multiply(ad.reshape(ad.narrow(log_probs, 1, 0, 1), (p,)), -1.0)


def info_nce(query: Tensor, positive: Tensor, negatives, tau: float) -> Tensor:
    """Single-query InfoNCE; ``negatives`` is a (K, h) tensor or a sequence."""
    h = query.shape[-1]
    q = ad.reshape(query, (1, h))
    pos = ad.reshape(positive, (1, h))
    if isinstance(negatives, Tensor):
        negs = ad.reshape(negatives, (1,) + tuple(negatives.shape))
    elif len(negatives) == 0:
        negs = None
    else:
        stacked = ad.concat([ad.reshape(n, (1, h)) for n in negatives], axis=0)
        negs = ad.reshape(stacked, (1, len(negatives), h))
    rows = info_nce_rows(q, pos, negs, tau)
    return ad.reshape(rows, ())


def _positions_loss(queries: Tensor, emb_table: Tensor, pos_ids: np.ndarray,
                    neg_ids: np.ndarray, tau: float) -> Tensor:
    positives = ad.gather_rows(emb_table, pos_ids)
    negatives = ad.gather_rows(emb_table, neg_ids) if neg_ids.shape[1] else None
    return ad.reduce_mean(info_nce_rows(queries, positives, negatives, tau))


def shared_loss(f_sha: Tensor, emb_table: Tensor, index: tuple[np.ndarray, ...],
                pos_ids: np.ndarray, neg_ids: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over merged-timeline positions predicting the next item."""
    if index[0].size == 0:
        return _zero()
    queries = ad.select_positions(f_sha, index)
    return _positions_loss(queries, emb_table, pos_ids, neg_ids, tau)


def specific_loss(f_spec: Tensor, f_sha: Tensor, emb_table: Tensor,
                  index: tuple[np.ndarray, ...], pos_ids: np.ndarray,
                  neg_ids: np.ndarray, tau: float) -> Tensor:
    """Per-domain InfoNCE with query F_spec + stop_gradient(F_sha).

    The stop-gradient keeps domain losses from backpropagating into the
    shared representation.
    """
    if index[0].size == 0:
        return _zero()
    queries = ad.add(
        ad.select_positions(f_spec, index),
        ad.stop_gradient(ad.select_positions(f_sha, index)),
    )
    return _positions_loss(queries, emb_table, pos_ids, neg_ids, tau)


# ---------------------------------------------------------------------------
# router-prior KL
# ---------------------------------------------------------------------------


def estimate_router_priors(model: CrossDomainRecommender,
                           pseudo: PseudoSequenceSet) -> dict[str, np.ndarray]:
    """Mean pooled router posterior over the pseudo set, per stream.

    Pooling is the mean over a pseudo sequence's non-PAD positions; the
    prior is the average over pseudo sequences that have such positions.
    Runs without a tape: the prior is a constant target.
    """
    from crossseq.data import FLAG_A, FLAG_B, FLAG_PAD  # local to avoid clutter

    items = {
        "A": np.stack([t.items_a for t in pseudo.sequences]),
        "B": np.stack([t.items_b for t in pseudo.sequences]),
        "M": np.stack([t.items_m for t in pseudo.sequences]),
    }
    flags = np.stack([t.domain_flags for t in pseudo.sequences])
    valid = {"A": flags == FLAG_A, "B": flags == FLAG_B, "M": flags != FLAG_PAD}

    priors: dict[str, np.ndarray] = {}
    n = model.config.n_experts
    with ad.no_grad():
        for stream in ("A", "B", "M"):
            out = model.router_weights(items[stream], valid[stream], stream)
            w = out.weights.values
            v = valid[stream]
            counts = v.sum(axis=1)
            keep = counts > 0
            if not keep.any():
                priors[stream] = np.full(n, 1.0 / n)
                continue
            pooled = (w * v[:, :, None]).sum(axis=1)[keep] / counts[keep, None]
            prior = pooled.mean(axis=0)
            priors[stream] = prior / prior.sum()
    return priors


def context_kl_loss(router_weights: Mapping[str, Tensor],
                    valid: Mapping[str, np.ndarray],
                    priors: Mapping[str, np.ndarray]) -> Tensor:
    """Sum over streams of the mean per-position KL(q_t || prior)."""
    total = _zero()
    for stream in ("A", "B", "M"):
        index = np.nonzero(valid[stream])
        if index[0].size == 0:
            continue
        rows = ad.select_positions(router_weights[stream], index)
        kl = ad.kl_categorical(rows, Tensor(priors[stream]))
        total = ad.add(total, ad.reduce_mean(kl))
    return total


# ---------------------------------------------------------------------------
# variational and adversarial regularizers
# ---------------------------------------------------------------------------


def variational_kl_loss(latents: Mapping[str, tuple[Tensor, Tensor, Tensor]],
                        valid_m: np.ndarray) -> Tensor:
    """Mean Gaussian KL to N(0, I) over valid merged positions, A plus B."""
    index = np.nonzero(valid_m)
    if index[0].size == 0:
        return _zero()
    total = _zero()
    for stream in ("A", "B"):
        mu, log_var, _z = latents[stream]
        kl = ad.kl_diag_gaussian_to_std(
            ad.select_positions(mu, index), ad.select_positions(log_var, index)
        )
        total = ad.add(total, ad.reduce_mean(kl))
    return total


def soft_bce(p: Tensor, label: float) -> Tensor:
    """Mean -(y log p + (1-y) log(1-p)) with probabilities floored at 1e-12."""
    p = ad.reshape(p, (p.size,))
    log_p = ad.log(ad.clip_min(p, LOG_EPS))
    log_not_p = ad.log(ad.clip_min(ad.add(ad.multiply(p, -1.0), 1.0), LOG_EPS))
    term = ad.add(ad.multiply(log_p, -label), ad.multiply(log_not_p, -(1.0 - label)))
    return ad.reduce_mean(term)


def adversarial_loss(p_shared: Tensor | None, p_spec_a: Tensor | None,
                     p_spec_b: Tensor | None) -> Tensor:
    """Soft-label domain classification loss summed over the three streams."""
    total = _zero()
    for p, kind in ((p_shared, "shared"), (p_spec_a, "specific_A"), (p_spec_b, "specific_B")):
        if p is not None and p.size > 0:
            total = ad.add(total, soft_bce(p, SOFT_LABELS[kind]))
    return total


def total_loss(l_sha: Tensor, l_a: Tensor, l_b: Tensor, l_c: Tensor,
               l_var: Tensor, l_adv: Tensor,
               weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Recommendation losses plus weighted regularizers."""
    weights.validate()
    total = ad.add(ad.add(l_sha, l_a), l_b)
    total = ad.add(total, ad.multiply(l_c, weights.lambda1))
    total = ad.add(total, ad.multiply(l_var, weights.lambda2))
    total = ad.add(total, ad.multiply(l_adv, weights.lambda3))
    report = LossReport(
        l_sha=l_sha.item(), l_a=l_a.item(), l_b=l_b.item(), l_c=l_c.item(),
        l_var=l_var.item(), l_adv=l_adv.item(), total=total.item(),
    )
    return total, report


# ---------------------------------------------------------------------------
# batch orchestration
# ---------------------------------------------------------------------------


def compute_losses(model: CrossDomainRecommender, bundle: RepresentationBundle,
                   batch, weights: LossWeights,
                   priors: Mapping[str, np.ndarray] | None,
                   grl_lambda: float) -> tuple[Tensor, LossReport]:
    """Assemble the six terms for one training batch.

    ``batch`` carries the prediction positions and sampled item ids (see
    trainer.TrainingBatch); variant flags on the model decide which
    regularizers exist.
    """
    emb = model.params["item_emb"]
    l_sha = shared_loss(bundle.f_sha, emb, batch.m_index, batch.m_pos, batch.m_neg,
                        weights.tau)
    l_a = specific_loss(bundle.f_spec_a, bundle.f_sha, emb, batch.a_index,
                        batch.a_pos, batch.a_neg, weights.tau)
    l_b = specific_loss(bundle.f_spec_b, bundle.f_sha, emb, batch.b_index,
                        batch.b_pos, batch.b_neg, weights.tau)

    if model.flags.use_router and priors is not None and weights.lambda1 > 0:
        l_c = context_kl_loss({s: bundle.router[s].weights for s in ("A", "B", "M")},
                              bundle.valid, priors)
    else:
        l_c = _zero()

    if model.flags.use_vd and bundle.latents is not None and weights.lambda2 > 0:
        l_var = variational_kl_loss(bundle.latents, bundle.valid["M"])
    else:
        l_var = _zero()

    if model.flags.use_adv and weights.lambda3 > 0:
        idx_m = np.nonzero(bundle.valid["M"])
        idx_a = np.nonzero(bundle.valid["A"])
        idx_b = np.nonzero(bundle.valid["B"])
        p_sha = model.discriminate(ad.select_positions(bundle.f_sha, idx_m),
                                   "shared", grl_lambda) if idx_m[0].size else None
        p_a = model.discriminate(ad.select_positions(bundle.f_spec_a, idx_a),
                                 "specific_A") if idx_a[0].size else None
        p_b = model.discriminate(ad.select_positions(bundle.f_spec_b, idx_b),
                                 "specific_B") if idx_b[0].size else None
        l_adv = adversarial_loss(p_sha, p_a, p_b)
    else:
        l_adv = _zero()

    return total_loss(l_sha, l_a, l_b, l_c, l_var, l_adv, weights)
