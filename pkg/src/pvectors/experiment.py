"""Seeded synthetic experiment: train both branches, couple them, compare held-out EERs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pvectors.config import TOY, ModelConfig
from pvectors.metrics import ScoreSet, Trial, adaptive_snorm, eer, min_dcf, score_trials
from pvectors.model import Checkpoint, PVectors, model_from_checkpoint
from pvectors.training import Dataset, LogFn, SynthSpec, TrainConfig, embed, gen_synth, train_stage1, train_stage2

TOY_TRAIN = TrainConfig(epochs_stage1=10, epochs_stage2=6)
HELD_OUT_OFFSET = 1000


def pair_trials(data: Dataset) -> list[Trial]:
    """Every unordered pair of utterances, labelled by whether the speakers match."""
    n = len(data)
    return [
        Trial(bool(data.labels[i] == data.labels[j]), data.ids[i], data.ids[j])
        for i in range(n)
        for j in range(i + 1, n)
    ]


def speaker_centroids(emb: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.stack([emb[labels == s].mean(axis=0) for s in np.unique(labels)])


def score_model(model, train: Dataset, test: Dataset, top_k: int = 10) -> ScoreSet:
    """Cosine scores on all held-out pairs, s-normed against training-speaker centroids."""
    test_emb = embed(model, test.feats)
    cohort = speaker_centroids(embed(model, train.feats), train.labels)
    table = dict(zip(test.ids, test_emb))
    return adaptive_snorm(score_trials(pair_trials(test), table), table, cohort, top_k)


@dataclass
class SystemResult:
    eer: float
    min_dcf: float
    eer_raw: float


@dataclass
class ExperimentResult:
    seed: int
    systems: dict[str, SystemResult] = field(default_factory=dict)
    gate_shift: list[float] = field(default_factory=list)
    losses: dict[str, list[float]] = field(default_factory=dict)
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)


def _summarize(scores: ScoreSet) -> SystemResult:
    return SystemResult(
        eer(scores.final, scores.labels),
        min_dcf(scores.final, scores.labels),
        eer(scores.scores, scores.labels),
    )


def run_experiment(
    seed: int,
    model_cfg: ModelConfig = TOY,
    train_cfg: TrainConfig = TOY_TRAIN,
    spec: SynthSpec = SynthSpec(),
    held_out: SynthSpec = SynthSpec(speakers=10, utterances=6),
    top_k: int = 10,
    log: Optional[LogFn] = None,
) -> ExperimentResult:
    """Train 1td, 1tr and the coupled model on synthetic speakers; score unseen speakers."""
    spec = SynthSpec(**{**spec.__dict__, "n_mels": model_cfg.n_mels})
    held_out = SynthSpec(**{**held_out.__dict__, "n_mels": model_cfg.n_mels, "noise": spec.noise})
    train = gen_synth(spec, seed)
    test = gen_synth(held_out, seed + HELD_OUT_OFFSET)
    cfg = train_cfg.with_(seed=seed)
    result = ExperimentResult(seed)

    ckpt_td, result.losses["1td"] = train_stage1("td", train, model_cfg, cfg, log)
    ckpt_tr, result.losses["1tr"] = train_stage1("tr", train, model_cfg, cfg, log)
    ckpt_p, result.losses["2"] = train_stage2(ckpt_td, ckpt_tr, train, cfg, log)
    result.checkpoints = {"1td": ckpt_td, "1tr": ckpt_tr, "2": ckpt_p}

    for name, ckpt in result.checkpoints.items():
        result.systems[name] = _summarize(score_model(model_from_checkpoint(ckpt), train, test, top_k))

    trained = model_from_checkpoint(ckpt_p)
    assert isinstance(trained, PVectors)
    for g in trained.gates():
        result.gate_shift.append(float(np.linalg.norm(g.data - model_cfg.gate_init)))
    return result
