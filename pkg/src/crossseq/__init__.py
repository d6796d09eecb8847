"""Cross-domain sequential recommendation lab.

A dual-domain next-item recommender built from context-routed
mixture-of-experts self-attention encoders, a variational disentangler,
and an adversarial domain discriminator, trained with InfoNCE objectives
on a small numpy autodiff core. Ships the full data pipeline (ingestion,
preprocessing, leave-one-out splitting, synthetic causal generation),
the training loop, and the evaluation / ablation / robustness harness.
"""

__version__ = "0.1.0"
