"""Finite-difference check of the whole composed model, shared by the CLI and the tests."""

from __future__ import annotations

import math

import numpy as np

from pvectors.config import TOY, ModelConfig
from pvectors.model import PVectors, namespace
from pvectors.tensor import Tensor, check_gradients
from pvectors.tensor.gradcheck import GradCheckResult
from pvectors.training import am_softmax_loss

FD_STEP = 1e-4
# Some tensors feed batch norm through a per-channel constant (conv and LN
# biases) and so have an exactly zero gradient; their central difference is
# pure roundoff, around 1e-11 at this step. The floor keeps that from counting
# as a relative error.
REL_FLOOR = 1e-6


def composed_model_check(
    samples: int = 100,
    seed: int = 0,
    cfg: ModelConfig = TOY,
    batch: int = 4,
    frames: int = 16,
) -> GradCheckResult:
    """Margin loss through both branches, all bridges, the EAL and the head.

    Samples are spread evenly over the top-level namespaces so that the small
    bridge and EAL tensors are checked as well as the large branches. Dropout
    is disabled; batch norm runs on batch statistics. Elements whose probe
    straddles a relu or max kink are replaced by fresh draws and counted.
    """
    cfg = cfg.with_(dropout=0.0)
    rng = np.random.default_rng(seed)
    model = PVectors(cfg, rng, n_classes=3)
    x = Tensor(rng.normal(size=(batch, cfg.n_mels, frames)))
    labels = rng.integers(0, 3, size=batch)

    def loss():
        return am_softmax_loss(model(x), labels, model.head.weight, margin=0.2, scale=5.0)

    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        groups.setdefault(namespace(name), []).append((name, p))
    per_group = math.ceil(samples / len(groups))
    worst, checked, skipped, where = 0.0, 0, 0, ""
    for i, named in enumerate(groups.values()):
        for res in check_gradients(loss, named, h=FD_STEP, samples=per_group,
                                   rng=np.random.default_rng([seed, i]), floor=REL_FLOOR,
                                   skip_kinks=True):
            checked += res.checked
            skipped += res.skipped
            if res.max_rel_error >= worst:
                worst, where = res.max_rel_error, res.name
    return GradCheckResult(f"coupled model (worst: {where})", worst, checked, skipped)
