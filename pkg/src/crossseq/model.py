"""Forward computation of the dual-domain recommender.

Three aligned input streams (domain A, domain B, and the merged timeline)
are embedded with shared item/position tables, encoded by a bank of
single-block causal self-attention experts, and combined per position by a
context router: the first R experts are shared across domains, the rest are
domain-specific with top-K selection for the single-domain streams and full
activation for the merged stream. A variational encoder/decoder pair
reconstructs per-domain content from the merged stream's specific
representation, a shared two-layer ReLU network fuses everything, and a
small discriminator (behind a gradient-reversal layer on the shared path)
scores domain origin.

Parameters live in a flat name -> Tensor dict so the optimizer, checkpoints
and gradient tests can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from crossseq import autodiff as ad
from crossseq.autodiff import Tensor
from crossseq.data import FLAG_A, FLAG_B, FLAG_PAD

VARIANTS = ("full", "no_AL", "no_VD", "no_AL_VD", "no_CAR", "no_EIS", "backbone")
STREAMS = ("A", "B", "M")

INIT_STD = 0.02


@dataclass
class VariantFlags:
    use_adv: bool
    use_vd: bool
    use_router: bool
    use_eis: bool


def variant_flags(variant: str) -> VariantFlags:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return {
        "full": VariantFlags(True, True, True, True),
        "no_AL": VariantFlags(False, True, True, True),
        "no_VD": VariantFlags(True, False, True, True),
        "no_AL_VD": VariantFlags(False, False, True, True),
        "no_CAR": VariantFlags(True, True, False, True),
        "no_EIS": VariantFlags(True, True, True, False),
        "backbone": VariantFlags(False, False, False, False),
    }[variant]


@dataclass
class ModelConfig:
    n_items_a: int
    n_items_b: int
    max_len: int = 50
    hidden: int = 32
    n_experts: int = 5
    n_shared: int = 2
    top_k: int = 2
    latent_dim: int = 16
    n_heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.2
    variant: str = "full"
    router_input: str = "position"  # or "prefix_mean"
    normalize_shared_sum: bool = False

    @property
    def n_items(self) -> int:
        # unified item space, row 0 is the padding token
        return self.n_items_a + self.n_items_b + 1

    def validate(self) -> None:
        if not 1 <= self.n_shared < self.n_experts:
            raise ValueError("need 1 <= R < N")
        if not 1 <= self.top_k <= self.n_experts - self.n_shared:
            raise ValueError("need 1 <= K <= N - R")
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if not 0.0 <= self.dropout < 0.9:
            raise ValueError("dropout must be in [0, 0.9)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.router_input not in ("position", "prefix_mean"):
            raise ValueError("router_input must be 'position' or 'prefix_mean'")


@dataclass
class RouterOutput:
    scores: Tensor        # (B, T, N)
    mask: np.ndarray      # (B, T, N) binary
    weights: Tensor       # (B, T, N) rows on the simplex, masked entries 0


@dataclass
class RepresentationBundle:
    """Everything the objectives and the evaluation head consume."""

    e_a: Tensor
    e_b: Tensor
    e_m: Tensor
    router: dict[str, RouterOutput]
    h_sha: Tensor
    h_spec: dict[str, Tensor]            # per stream A/B/M
    latents: dict[str, tuple[Tensor, Tensor, Tensor]] | None  # (mu, log_var, z)
    recon: dict[str, Tensor]             # M->A / M->B reconstructions
    f_sha: Tensor
    f_spec_a: Tensor
    f_spec_b: Tensor
    valid: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# free functions (unit-testable pieces of the forward pass)
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) applied over the last axis of an arbitrarily batched x."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = ad.matmul(flat, w)
    if b is not None:
        out = ad.add(out, b)
    if x.ndim != 2:
        out = ad.reshape(out, lead + (w.shape[-1],))
    return out


def split_context_bank(context: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    """Split the (N, h*(h+1)) context bank into per-context (W_n, a_n)."""
    n, width = context.shape
    if width != hidden * (hidden + 1):
        raise ad.ShapeError(
            f"context bank width {width} != h*(h+1) = {hidden * (hidden + 1)}"
        )
    w = ad.reshape(ad.narrow(context, 1, 0, hidden * hidden), (n, hidden, hidden))
    a = ad.narrow(context, 1, hidden * hidden, hidden)
    return w, a


def router_scores(e: Tensor, context: Tensor) -> Tensor:
    """Per-position context scores s[t, n] = <a_n, swish(W_n e_t)>."""
    b, t, hidden = e.shape
    w, a = split_context_bank(context, hidden)
    n = w.shape[0]
    # (B*T, h) @ (h, N*h): row [n, i] of the reshaped bank is W_n[i, :]
    wf = ad.transpose(ad.reshape(w, (n * hidden, hidden)), (1, 0))
    pre = ad.reshape(ad.matmul(ad.reshape(e, (b * t, hidden)), wf), (b, t, n, hidden))
    act = ad.swish(pre)
    return ad.reduce_sum(ad.multiply(act, a), axis=-1)


def route(scores: Tensor, which: str, n_shared: int, top_k: int) -> RouterOutput:
    """Masked expert weights: shared always on, top-K specific for A/B, all for M.

    Top-K ties break toward the lower expert index.
    """
    if which not in STREAMS:
        raise ValueError(f"stream must be one of {STREAMS}, got {which!r}")
    values = scores.values
    n = values.shape[-1]
    if which == "M":
        mask = np.ones(values.shape, dtype=np.int8)
    else:
        mask = np.zeros(values.shape, dtype=np.int8)
        mask[..., :n_shared] = 1
        specific = values[..., n_shared:]
        order = np.argsort(-specific, axis=-1, kind="stable")
        top = order[..., :top_k]
        np.put_along_axis(mask[..., n_shared:], top, 1, axis=-1)
    weights = ad.masked_softmax(scores, mask)
    return RouterOutput(scores=scores, mask=mask, weights=weights)


def aggregate(stacks: Mapping[str, Tensor], weights: Mapping[str, Tensor],
              n_shared: int, normalize_shared: bool = False
              ) -> tuple[Tensor, dict[str, Tensor]]:
    """Combine expert outputs into the shared and per-stream specific reps.

    ``stacks[X]`` has shape (B, T, N, h); the shared representation sums the
    first R experts' contributions across all three streams (unnormalized
    triple sum unless ``normalize_shared``), the specific one sums the
    remaining experts within each stream.
    """
    shared_parts = []
    spec: dict[str, Tensor] = {}
    for stream in STREAMS:
        stack = stacks[stream]
        n = stack.shape[2]
        w4 = ad.reshape(weights[stream], weights[stream].shape + (1,))
        weighted = ad.multiply(stack, w4)
        shared_parts.append(ad.reduce_sum(ad.narrow(weighted, 2, 0, n_shared), axis=2))
        spec[stream] = ad.reduce_sum(
            ad.narrow(weighted, 2, n_shared, n - n_shared), axis=2
        )
    h_sha = ad.add(ad.add(shared_parts[0], shared_parts[1]), shared_parts[2])
    if normalize_shared:
        h_sha = ad.multiply(h_sha, 1.0 / 3.0)
    return h_sha, spec


def causal_attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, 1, T, T) boolean mask: position t may attend to s <= t, s non-PAD."""
    b, t = valid.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    return (causal[None, :, :] & valid[:, None, :])[:, None, :, :]


def expert_forward(e: Tensor, theta: Mapping[str, Tensor], valid: np.ndarray,
                   n_heads: int) -> Tensor:
    """One pre-norm self-attention block; PAD rows pass through unchanged.

    Queries attend causally and only to non-PAD keys; attention and
    feed-forward deltas are zeroed at PAD query rows so padding slots carry
    their embedding through the block.
    """
    b, t, hidden = e.shape
    dh = hidden // n_heads
    keep = valid[:, :, None].astype(e.values.dtype)

    x = ad.layer_norm(e, theta["ln1_g"], theta["ln1_b"])
    q = dense(x, theta["wq"], theta["bq"])
    k = dense(x, theta["wk"], theta["bk"])
    v = dense(x, theta["wv"], theta["bv"])

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scores = ad.multiply(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.masked_softmax(scores, causal_attention_mask(valid), allow_empty=True)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, hidden))
    delta = dense(ctx, theta["wo"], theta["bo"])
    h1 = ad.add(e, ad.multiply(delta, keep))

    y = ad.layer_norm(h1, theta["ln2_g"], theta["ln2_b"])
    ff = dense(ad.relu(dense(y, theta["w1"], theta["b1"])), theta["w2"], theta["b2"])
    return ad.add(h1, ad.multiply(ff, keep))


def apply_fusion(x: Tensor, params: Mapping[str, Tensor] | None) -> Tensor:
    """Two-layer ReLU feed-forward fusion; ``params=None`` is the identity hook."""
    if params is None:
        return x
    return dense(ad.relu(dense(x, params["w1"], params["b1"])), params["w2"], params["b2"])


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class CrossDomainRecommender:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.flags = variant_flags(config.variant)
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _weight(self, rng, name: str, shape) -> None:
        self.params[name] = ad.parameter(rng.normal(0.0, INIT_STD, size=shape))

    def _zeros(self, name: str, shape) -> None:
        self.params[name] = ad.parameter(np.zeros(shape))

    def _ones(self, name: str, shape) -> None:
        self.params[name] = ad.parameter(np.ones(shape))

    def _init_params(self, rng) -> None:
        cfg = self.config
        h, d = cfg.hidden, cfg.latent_dim
        self._weight(rng, "item_emb", (cfg.n_items, h))
        self._weight(rng, "pos_emb", (cfg.max_len, h))
        for n in range(cfg.n_experts):
            p = f"expert{n}."
            self._ones(p + "ln1_g", h)
            self._zeros(p + "ln1_b", h)
            for w, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
                self._weight(rng, p + w, (h, h))
                self._zeros(p + bias, h)
            self._ones(p + "ln2_g", h)
            self._zeros(p + "ln2_b", h)
            self._weight(rng, p + "w1", (h, cfg.ffn_mult * h))
            self._zeros(p + "b1", cfg.ffn_mult * h)
            self._weight(rng, p + "w2", (cfg.ffn_mult * h, h))
            self._zeros(p + "b2", h)
        if self.flags.use_router:
            self._weight(rng, "router.context", (cfg.n_experts, h * (h + 1)))
        if self.flags.use_vd:
            for enc in ("vd.enc_a.", "vd.enc_b."):
                self._weight(rng, enc + "w1", (h, h))
                self._zeros(enc + "b1", h)
                self._weight(rng, enc + "w2", (h, 2 * d))
                self._zeros(enc + "b2", 2 * d)
            self._weight(rng, "vd.dec.w1", (d, h))
            self._zeros("vd.dec.b1", h)
            self._weight(rng, "vd.dec.w2", (h, h))
            self._zeros("vd.dec.b2", h)
        self._weight(rng, "fuse.w1", (h, h))
        self._zeros("fuse.b1", h)
        self._weight(rng, "fuse.w2", (h, h))
        self._zeros("fuse.b2", h)
        if self.flags.use_adv:
            self._weight(rng, "disc.w1", (h, max(h // 2, 1)))
            self._zeros("disc.b1", max(h // 2, 1))
            self._weight(rng, "disc.w2", (max(h // 2, 1), 1))
            self._zeros("disc.b2", 1)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _group(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix)
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- forward pieces -----------------------------------------------------

    def embed(self, items: np.ndarray, train: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        """Item plus position embedding, dropout when training."""
        items = np.asarray(items)
        if items.max(initial=0) >= self.config.n_items:
            raise IndexError("item id outside the embedding table")
        e = ad.add(ad.gather_rows(self.params["item_emb"], items),
                   self.params["pos_emb"])
        return ad.dropout(e, self.config.dropout, rng=rng, train=train)

    def _router_input(self, e: Tensor, valid: np.ndarray) -> Tensor:
        if self.config.router_input == "prefix_mean":
            return ad.prefix_mean(e, valid)
        return e

    def _scores(self, e: Tensor, valid: np.ndarray) -> Tensor:
        if self.flags.use_router:
            return router_scores(self._router_input(e, valid), self.params["router.context"])
        b, t, _h = e.shape
        return Tensor(np.zeros((b, t, self.config.n_experts)))

    def _route(self, scores: Tensor, which: str) -> RouterOutput:
        if self.flags.use_eis:
            return route(scores, which, self.config.n_shared, self.config.top_k)
        mask = np.ones(scores.values.shape, dtype=np.int8)
        return RouterOutput(scores=scores, mask=mask,
                            weights=ad.masked_softmax(scores, mask))

    def router_weights(self, items: np.ndarray, valid: np.ndarray,
                       which: str) -> RouterOutput:
        """Routing for one stream without running the experts (prior estimation)."""
        e = self.embed(items, train=False)
        return self._route(self._scores(e, valid), which)

    def variational_disentangle(self, h_spec_m: Tensor, train: bool,
                                rng: np.random.Generator | None,
                                eps: Mapping[str, np.ndarray] | None = None):
        """Per-position Gaussian encoders for A and B plus the shared decoder.

        Returns ({stream: (mu, log_var, z)}, {stream: reconstruction}).
        At eval time z is the posterior mean.
        """
        d = self.config.latent_dim
        latents: dict[str, tuple[Tensor, Tensor, Tensor]] = {}
        recon: dict[str, Tensor] = {}
        for stream, enc in (("A", "vd.enc_a."), ("B", "vd.enc_b.")):
            hidden = ad.relu(dense(h_spec_m, self.params[enc + "w1"], self.params[enc + "b1"]))
            stats = dense(hidden, self.params[enc + "w2"], self.params[enc + "b2"])
            mu = ad.narrow(stats, stats.ndim - 1, 0, d)
            log_var = ad.narrow(stats, stats.ndim - 1, d, d)
            if train:
                noise = eps[stream] if eps is not None else None
                z = ad.reparameterize(mu, log_var, rng=rng, eps=noise)
            else:
                z = mu
            dec_h = ad.relu(dense(z, self.params["vd.dec.w1"], self.params["vd.dec.b1"]))
            recon[stream] = dense(dec_h, self.params["vd.dec.w2"], self.params["vd.dec.b2"])
            latents[stream] = (mu, log_var, z)
        return latents, recon

    def discriminate(self, f: Tensor, kind: str, grl_lambda: float = 1.0) -> Tensor:
        """Domain probability per row; the shared path goes through the GRL."""
        if kind not in ("shared", "specific_A", "specific_B"):
            raise ValueError(f"unknown discriminator input kind {kind!r}")
        if not self.flags.use_adv:
            raise RuntimeError(f"variant {self.config.variant!r} has no discriminator")
        x = ad.grad_reverse(f, grl_lambda) if kind == "shared" else f
        hidden = ad.relu(dense(x, self.params["disc.w1"], self.params["disc.b1"]))
        return ad.sigmoid(dense(hidden, self.params["disc.w2"], self.params["disc.b2"]))

    # -- full forward -------------------------------------------------------

    def forward(self, items_m: np.ndarray, items_a: np.ndarray, items_b: np.ndarray,
                flags: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                eps: Mapping[str, np.ndarray] | None = None) -> RepresentationBundle:
        cfg = self.config
        valid = {
            "A": np.asarray(flags) == FLAG_A,
            "B": np.asarray(flags) == FLAG_B,
            "M": np.asarray(flags) != FLAG_PAD,
        }
        streams = {"A": items_a, "B": items_b, "M": items_m}

        embedded = {x: self.embed(streams[x], train=train, rng=rng) for x in STREAMS}
        router = {x: self._route(self._scores(embedded[x], valid[x]), x) for x in STREAMS}

        stacks = {}
        for x in STREAMS:
            outs = []
            for n in range(cfg.n_experts):
                h_n = expert_forward(embedded[x], self._group(f"expert{n}."),
                                     valid[x], cfg.n_heads)
                outs.append(ad.reshape(h_n, (h_n.shape[0], h_n.shape[1], 1, h_n.shape[2])))
            stacks[x] = ad.concat(outs, axis=2)

        h_sha, h_spec = aggregate(
            stacks, {x: router[x].weights for x in STREAMS},
            cfg.n_shared, cfg.normalize_shared_sum,
        )

        if self.flags.use_vd:
            latents, recon = self.variational_disentangle(h_spec["M"], train, rng, eps)
        else:
            latents = None
            zeros = Tensor(np.zeros(h_spec["M"].shape))
            recon = {"A": zeros, "B": zeros}

        fuse = self._group("fuse.")
        f_sha = apply_fusion(h_sha, fuse)
        f_spec_a = apply_fusion(ad.add(h_spec["A"], recon["A"]), fuse)
        f_spec_b = apply_fusion(ad.add(h_spec["B"], recon["B"]), fuse)

        return RepresentationBundle(
            e_a=embedded["A"], e_b=embedded["B"], e_m=embedded["M"],
            router=router, h_sha=h_sha, h_spec=h_spec,
            latents=latents, recon=recon,
            f_sha=f_sha, f_spec_a=f_spec_a, f_spec_b=f_spec_b,
            valid=valid,
        )

    def forward_triples(self, triples, train: bool = False,
                        rng: np.random.Generator | None = None) -> RepresentationBundle:
        items_m = np.stack([t.items_m for t in triples])
        items_a = np.stack([t.items_a for t in triples])
        items_b = np.stack([t.items_b for t in triples])
        flags = np.stack([t.domain_flags for t in triples])
        return self.forward(items_m, items_a, items_b, flags, train=train, rng=rng)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_snapshot(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise KeyError(f"parameter names do not match checkpoint: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            self.params[k] = ad.parameter(np.asarray(v))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "crossseq-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: CrossDomainRecommender,
                    extra_header: dict | None = None,
                    extra_arrays: Mapping[str, np.ndarray] | None = None) -> None:
    """Parameter blobs plus a JSON header in one npz container."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
    }
    if extra_header:
        header.update(extra_header)
    arrays = {f"param:{k}": v.values for k, v in model.params.items()}
    if extra_arrays:
        arrays.update({f"extra:{k}": np.asarray(v) for k, v in extra_arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[CrossDomainRecommender, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, header, extra arrays)."""
    with np.load(path, allow_pickle=False) as blob:
        header = json.loads(str(blob["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a crossseq checkpoint")
        cfg_d = dict(header["config"])
        cfg = ModelConfig(**cfg_d)
        model = CrossDomainRecommender(cfg, seed=header.get("seed", 0))
        params = {k[len("param:"):]: blob[k] for k in blob.files if k.startswith("param:")}
        extras = {k[len("extra:"):]: blob[k] for k in blob.files if k.startswith("extra:")}
    model.load_snapshot(params)
    return model, header, extras
