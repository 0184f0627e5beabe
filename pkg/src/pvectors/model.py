"""Model assembly, checkpoints and stage-1 -> stage-2 weight transfer."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from pvectors.config import ModelConfig
from pvectors.errors import ConfigError, DimensionError, FormatError, TransferError
from pvectors.sfai import FSB1, FSB2, DependencyTrace, coupled_forward
from pvectors.tdnn import TdnnBranch
from pvectors.tensor import BatchNorm1d, Linear, Module, Parameter, Tensor, ops
from pvectors.transformer import TransformerBranch

BRANCH_NAMESPACES = ("tdnn", "trans")
CLASSIFIER_NAMESPACES = ("head_td", "head_tr", "head")
BRIDGE_NAMESPACES = ("fsb1a", "fsb1b", "fsb2a", "fsb2b", "eal")


class ClassifierHead(Module):
    """Class weight matrix (D, N) for the additive-margin softmax; columns kept unit-norm."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        w = rng.normal(size=(dim, n_classes))
        self.weight = Parameter(w / np.linalg.norm(w, axis=0, keepdims=True))

    def renormalize(self) -> None:
        self.weight.data /= np.linalg.norm(self.weight.data, axis=0, keepdims=True)


class EAL(Module):
    """Embedding aggregation: BN(FC(concat(e_td, e_tr)))."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.fc = Linear(2 * dim, dim, rng)
        self.bn = BatchNorm1d(dim)

    def forward(self, e_td: Tensor, e_tr: Tensor) -> Tensor:
        if e_td.shape != e_tr.shape or e_td.shape[-1] != self.dim:
            raise DimensionError(f"EAL expects two (B, {self.dim}) embeddings, got {e_td.shape}, {e_tr.shape}")
        squeeze = e_td.ndim == 1
        if squeeze:
            e_td, e_tr = ops.reshape(e_td, (1, self.dim)), ops.reshape(e_tr, (1, self.dim))
        out = self.bn(self.fc(ops.concat([e_td, e_tr], 1)))
        return ops.reshape(out, (self.dim,)) if squeeze else out


class BranchModel(Module):
    """One standalone branch plus its stage-1 classifier head."""

    def __init__(self, branch: str, cfg: ModelConfig, n_classes: Optional[int], rng: np.random.Generator):
        super().__init__()
        if branch not in ("td", "tr"):
            raise ConfigError(f"branch must be 'td' or 'tr', got {branch!r}")
        self.branch, self.cfg = branch, cfg
        if branch == "td":
            self.tdnn = TdnnBranch(cfg, rng)
        else:
            self.trans = TransformerBranch(cfg, rng)
        if n_classes is not None:
            setattr(self, self.head_name, ClassifierHead(cfg.embed_dim, n_classes, rng))

    @property
    def head_name(self) -> str:
        return "head_" + self.branch

    @property
    def head(self) -> Optional[ClassifierHead]:
        return getattr(self, self.head_name, None)

    @property
    def net(self):
        return self.tdnn if self.branch == "td" else self.trans

    def forward(self, feat: Tensor) -> Tensor:
        return self.net(feat)[1]


class PVectors(Module):
    """Both branches, four bridges and the EAL; ``head`` is attached for stage 2."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, n_classes: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.tdnn = TdnnBranch(cfg, rng)
        self.trans = TransformerBranch(cfg, rng)
        self.init_bridges(rng)
        if n_classes is not None:
            self.head = ClassifierHead(cfg.embed_dim, n_classes, rng)

    def init_bridges(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        C, d, s = cfg.tdnn_channels, cfg.d_model, cfg.stem_stride
        self.fsb1a = FSB1(C, d, s, rng, cfg.gate_init)
        self.fsb1b = FSB1(C, d, s, rng, cfg.gate_init)
        self.fsb2a = FSB2(d, C, s, rng, cfg.gate_init)
        self.fsb2b = FSB2(d, C, s, rng, cfg.gate_init)
        self.eal = EAL(cfg.embed_dim, rng)

    @property
    def bridges(self) -> tuple:
        return self.fsb1a, self.fsb1b, self.fsb2a, self.fsb2b

    def gates(self) -> list[Parameter]:
        return [b.gate for b in self.bridges]

    def branch_embeddings(self, feat: Tensor, trace: Optional[DependencyTrace] = None):
        return coupled_forward(feat, self.tdnn, self.trans, *self.bridges, trace=trace)

    def forward(self, feat: Tensor, trace: Optional[DependencyTrace] = None) -> Tensor:
        e_td, e_tr = self.branch_embeddings(feat, trace)
        return self.eal(e_td, e_tr)


def namespace(name: str) -> str:
    return name.split(".", 1)[0]


def count_by_namespace(model: Module) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        counts[namespace(name)] = counts.get(namespace(name), 0) + p.size
    return counts


def param_count(cfg: ModelConfig, seed: int = 0) -> int:
    """Trainable scalars of the assembled model (classifier excluded)."""
    return PVectors(cfg, np.random.default_rng(seed)).num_parameters()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PVCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    """Named tensors plus metadata (stage, config, counters) and optional optimizer state."""

    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    state: Optional[dict[str, np.ndarray]] = None
    version: int = CKPT_VERSION

    @property
    def stage(self) -> str:
        return str(self.meta.get("stage", ""))

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["config"])

    def names(self, prefix: str) -> list[str]:
        return sorted(n for n in self.tensors if namespace(n) == prefix)


def _pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self) -> dict[str, np.ndarray]:
        (n,) = self.unpack("<I")
        out = {}
        for _ in range(n):
            (name_len,) = self.unpack("<H")
            name = self.take(name_len).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(meta)), meta]
    parts.append(_pack_entries(ckpt.tensors))
    if ckpt.state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1) + _pack_entries(ckpt.state))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})") from None
    tensors = r.entries()
    (has_state,) = r.unpack("<B")
    state = r.entries() if has_state else None
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(tensors, meta, state, version)


def checkpoint_from_model(model: Module, meta: dict, state: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(model.state_dict(), dict(meta), state)


def model_from_checkpoint(ckpt: Checkpoint, strict: bool = True) -> Module:
    """Rebuild the module a checkpoint came from and load its tensors (eval mode)."""
    cfg = ckpt.config
    rng = np.random.default_rng(0)
    n_classes = ckpt.meta.get("n_classes")
    if ckpt.stage in ("1td", "1tr"):
        model = BranchModel(ckpt.stage[1:], cfg, n_classes, rng)
    elif ckpt.stage == "2":
        has_head = any(namespace(n) == "head" for n in ckpt.tensors)
        model = PVectors(cfg, rng, n_classes if has_head else None)
    else:
        raise FormatError(f"unknown checkpoint stage {ckpt.stage!r}")
    try:
        model.load_state_dict(ckpt.tensors, strict=strict)
    except KeyError as exc:
        raise FormatError(str(exc)) from None
    return model.eval()


def transfer_weights(stage1_td: Checkpoint, stage1_tr: Checkpoint, seed: int = 0) -> Checkpoint:
    """Copy both trained branches into a fresh coupled model.

    Classifier heads are dropped; bridges and the EAL are newly initialized.
    Raises :class:`TransferError` listing every required tensor that is absent.
    """
    cfg = stage1_td.config
    if stage1_tr.config != cfg:
        raise ConfigError("stage-1 checkpoints were trained with different model configs")
    template = PVectors(cfg, np.random.default_rng(seed)).state_dict()
    sources = {"tdnn": stage1_td.tensors, "trans": stage1_tr.tensors}
    missing = [n for n in template if namespace(n) in sources and n not in sources[namespace(n)]]
    if missing:
        raise TransferError(missing)
    tensors = {}
    for name, fresh in template.items():
        ns = namespace(name)
        if ns in sources:
            src = sources[ns][name]
            if src.shape != fresh.shape:
                raise DimensionError(f"{name}: stage-1 shape {src.shape} != {fresh.shape}")
            tensors[name] = np.array(src, copy=True)
        else:
            tensors[name] = fresh
    meta = {
        "stage": "2",
        "config": cfg.to_dict(),
        "epoch": 0,
        "step": 0,
        "sources": [stage1_td.stage, stage1_tr.stage],
    }
    return Checkpoint(tensors, meta)
