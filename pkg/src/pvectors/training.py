"""Margin loss, optimizer, cyclical learning rate, synthetic data and the two training stages."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from pvectors.config import ModelConfig
from pvectors.errors import ConfigError, DimensionError, DivergenceError
from pvectors.features import crop_segment
from pvectors.model import (
    BranchModel,
    Checkpoint,
    ClassifierHead,
    PVectors,
    checkpoint_from_model,
    namespace,
    transfer_weights,
)
from pvectors.tensor import Parameter, Tape, Tensor, backward, ops

NORM_EPS = 1e-24


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def l2_normalize(x: Tensor, axis: int) -> Tensor:
    return x / ops.sqrt(ops.sum(ops.square(x), axis, keepdims=True) + NORM_EPS)


def cosine_logits(emb: Tensor, weight: Tensor) -> Tensor:
    """(B, D) embeddings against (D, N) class weights -> (B, N) cosines."""
    return ops.matmul(l2_normalize(emb, 1), l2_normalize(weight, 0))


def am_softmax_loss(emb: Tensor, labels, weight: Tensor, margin: float = 0.2, scale: float = 30.0) -> Tensor:
    """Additive-margin softmax: cross-entropy over s * (cos - m * onehot), batch mean."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if emb.ndim != 2 or emb.shape[1] != weight.shape[0]:
        raise DimensionError(f"embeddings {emb.shape} do not match class weights {weight.shape}")
    if labels.shape[0] != emb.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {emb.shape[0]} embeddings")
    n_classes = weight.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((emb.shape[0], n_classes))
    onehot[np.arange(emb.shape[0]), labels] = 1.0
    logits = (cosine_logits(emb, weight) - Tensor(margin * onehot)) * scale
    return -ops.sum(ops.log_softmax(logits, 1) * Tensor(onehot)) * (1.0 / emb.shape[0])


# ---------------------------------------------------------------------------
# learning rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triangular2Config:
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycle_steps: int = 6

    def __post_init__(self):
        if self.cycle_steps < 2 or self.cycle_steps % 2:
            raise ConfigError(f"cycle_steps must be an even integer >= 2, got {self.cycle_steps}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")


def triangular2_lr(step: int, cfg: Triangular2Config = Triangular2Config()) -> float:
    """Triangle wave from lr_min up to a peak and back, the peak height halving each cycle."""
    if step < 0:
        raise ValueError("step must be non-negative")
    half = cfg.cycle_steps // 2
    cycle = step // cfg.cycle_steps
    x = abs(step / half - 2 * cycle - 1)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * max(0.0, 1.0 - x) / 2.0**cycle


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:  # fmt: skip
    """One in-place bias-corrected Adam update; ``t`` is the 1-based step count."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(f"Adam state shapes differ: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over named parameters, with state that round-trips through checkpoints."""

    def __init__(self, named: Sequence[tuple[str, Parameter]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.m[name], self.v[name], self.t, lr, self.beta1, self.beta2, self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        out.update({"m." + n: a.copy() for n, a in self.m.items()})
        out.update({"v." + n: a.copy() for n, a in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for n in self.params:
            self.m[n][...] = state["m." + n]
            self.v[n][...] = state["v." + n]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic speakers: a smooth spectral envelope with a few formant-like peaks each.

    Every utterance is its speaker's template plus shared "phonetic" content,
    a per-utterance channel tilt and white noise; all three scale with
    ``noise`` so ``noise=0`` reproduces the template exactly.
    """

    speakers: int = 20
    utterances: int = 16
    n_mels: int = 24
    frames: int = 96
    noise: float = 0.3
    formants: int = 3

    def __post_init__(self):
        if self.speakers < 2:
            raise ConfigError("need at least two speakers")
        if self.utterances < 1 or self.n_mels < 2 or self.frames < 1 or self.noise < 0:
            raise ConfigError(f"invalid synthetic spec {self}")


@dataclass
class Dataset:
    feats: list[np.ndarray]
    labels: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.feats)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        return iter(zip(self.feats, self.labels.tolist()))

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def speaker_templates(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """(speakers, n_mels, frames) templates; a slow per-speaker temporal rhythm keeps them 2-D."""
    f = np.linspace(0.0, 1.0, spec.n_mels)
    t = np.arange(spec.frames)
    out = np.empty((spec.speakers, spec.n_mels, spec.frames))
    for s in range(spec.speakers):
        coef = rng.normal(size=4) / np.arange(1, 5)
        envelope = sum(c * np.cos(np.pi * (k + 1) * f) for k, c in enumerate(coef))
        for _ in range(spec.formants):
            centre, width = rng.uniform(0.1, 0.9), rng.uniform(0.03, 0.08)
            envelope = envelope + rng.uniform(0.8, 1.6) * np.exp(-0.5 * ((f - centre) / width) ** 2)
        rate, phase = rng.uniform(0.05, 0.3), rng.uniform(0, 2 * np.pi)
        rhythm = 0.5 * np.sin(rate * t + phase)
        out[s] = envelope[:, None] + np.outer(np.cos(np.pi * f * rng.integers(1, 4)), rhythm)
    return out


def gen_synth(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministic labelled log-mel-like matrices (n_mels, frames) for each speaker."""
    rng = np.random.default_rng(seed)
    templates = speaker_templates(spec, rng)
    f = np.linspace(-1.0, 1.0, spec.n_mels)[:, None]
    feats, labels, ids = [], [], []
    for s in range(spec.speakers):
        for u in range(spec.utterances):
            content = rng.normal(size=(spec.n_mels, spec.frames))
            content = (content + np.roll(content, 1, 1) + np.roll(content, 1, 0)) / np.sqrt(3.0)
            tilt = rng.normal() * f + rng.normal()
            white = rng.normal(size=(spec.n_mels, spec.frames))
            feats.append(templates[s] + spec.noise * (content + tilt + 0.5 * white))
            labels.append(s)
            ids.append(f"spk{s:03d}-utt{u:03d}")
    return Dataset(feats, np.array(labels, dtype=np.int64), ids)


def template_cosines(data: Dataset) -> tuple[float, float]:
    """Mean cosine similarity of flattened utterances within and across speakers."""
    x = np.stack([f.reshape(-1) - f.mean() for f in data.feats])
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    same = data.labels[:, None] == data.labels[None, :]
    off = ~np.eye(len(x), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the full-length 24 + 6 epoch run."""

    epochs_stage1: int = 24
    epochs_stage2: int = 6
    batch: int = 32
    crop: int = 64
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycle_epochs: int = 6
    margin: float = 0.2
    scale: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1 or self.batch < 1 or self.crop < 1:
            raise ConfigError(f"invalid training config {self}")
        if self.cycle_epochs < 1:
            raise ConfigError("cycle_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def schedule(self, steps_per_epoch: int) -> Triangular2Config:
        return Triangular2Config(self.lr_min, self.lr_max, 2 * max(1, self.cycle_epochs * steps_per_epoch // 2))


LogFn = Callable[[str], None]


def _batches(data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(data))
    n_full = max(1, len(order) // cfg.batch)
    for b in range(n_full):
        idx = order[b * cfg.batch : (b + 1) * cfg.batch]
        x = np.stack([crop_segment(data.feats[i], cfg.crop, rng) for i in idx])
        yield x, data.labels[idx]


def _run(
    model,
    head: ClassifierHead,
    data: Dataset,
    epochs: int,
    stage: str,
    cfg: TrainConfig,
    rng: np.random.Generator,
    log: Optional[LogFn],
) -> tuple[Adam, list[float]]:
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.n_classes > head.weight.shape[1]:
        raise DimensionError(f"{data.n_classes} speakers but the head has {head.weight.shape[1]} classes")
    steps_per_epoch = max(1, len(data) // cfg.batch)
    sched = cfg.schedule(steps_per_epoch)
    opt = Adam(model.named_parameters())
    losses = []
    step = 0
    model.train()
    for _ in range(epochs):
        for x, y in _batches(data, cfg, rng):
            lr = triangular2_lr(step, sched)
            model.zero_grad()
            with Tape() as tape:
                loss = am_softmax_loss(model(Tensor(x)), y, head.weight, cfg.margin, cfg.scale)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"stage {stage}: loss became {value} at step {step} (lr {lr:.3e})")
            backward(loss)
            tape.clear()
            opt.step(lr)
            head.renormalize()
            losses.append(value)
            if log is not None:
                log(f"{step}\t{stage}\t{lr:.6e}\t{value:.6f}")
            step += 1
    model.eval()
    return opt, losses


def train_stage1(
    branch: str,
    data: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    log: Optional[LogFn] = None,
) -> tuple[Checkpoint, list[float]]:
    """Train one standalone branch with its own margin-softmax head; return checkpoint and step losses."""
    stage = "1" + branch
    rng = np.random.default_rng([cfg.seed, 1 if branch == "td" else 2])
    model = BranchModel(branch, model_cfg, data.n_classes, rng)
    opt, losses = _run(model, model.head, data, cfg.epochs_stage1, stage, cfg, rng, log)
    meta = {
        "stage": stage,
        "config": model_cfg.to_dict(),
        "n_classes": data.n_classes,
        "epoch": cfg.epochs_stage1,
        "step": opt.t,
        "train": cfg.to_dict(),
    }
    return checkpoint_from_model(model, meta, opt.state()), losses


def train_stage2(
    ckpt_td: Checkpoint,
    ckpt_tr: Checkpoint,
    data: Dataset,
    cfg: TrainConfig = TrainConfig(),
    log: Optional[LogFn] = None,
) -> tuple[Checkpoint, list[float]]:
    """Transfer both branches, attach one head on the fused embedding and train everything."""
    if ckpt_td.stage != "1td" or ckpt_tr.stage != "1tr":
        raise ConfigError(f"stage 2 needs 1td and 1tr checkpoints, got {ckpt_td.stage!r}, {ckpt_tr.stage!r}")
    init = transfer_weights(ckpt_td, ckpt_tr, seed=cfg.seed)
    model_cfg = init.config
    rng = np.random.default_rng([cfg.seed, 3])
    model = PVectors(model_cfg, rng, data.n_classes)
    model.load_state_dict({**init.tensors, **_head_state(model)})
    opt, losses = _run(model, model.head, data, cfg.epochs_stage2, "2", cfg, rng, log)
    meta = dict(init.meta)
    meta.update({"n_classes": data.n_classes, "epoch": cfg.epochs_stage2, "step": opt.t, "train": cfg.to_dict()})
    return checkpoint_from_model(model, meta, opt.state()), losses


def _head_state(model: PVectors) -> dict[str, np.ndarray]:
    return {n: a for n, a in model.state_dict().items() if namespace(n) == "head"}


def embed(model, feats: Sequence[np.ndarray], batch: int = 64) -> np.ndarray:
    """Eval-mode embeddings as an (N, D) array; utterances of equal length share a batch."""
    model.eval()
    out: list = [None] * len(feats)
    by_len: dict[int, list[int]] = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[1], []).append(i)
    for idx in by_len.values():
        for start in range(0, len(idx), batch):
            chunk = idx[start : start + batch]
            emb = model(Tensor(np.stack([feats[i] for i in chunk]))).data
            for i, e in zip(chunk, emb):
                out[i] = e
    return np.stack(out)
