"""Global-feature branch: SFA front end, strided conv stem and pre-norm encoder blocks."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from pvectors.config import ModelConfig
from pvectors.errors import ConfigError, DimensionError
from pvectors.sfa import SFA
from pvectors.tdnn import STD_EPS, add_bridge
from pvectors.tensor import Conv1d, Dropout, LayerNorm, Linear, Module, ModuleList, Tensor, ops


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: dim // 2])
    return table


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.heads, self.head_dim = heads, dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        x = ops.reshape(x, (B, T, self.heads, self.head_dim))
        return ops.reshape(ops.permute(x, (0, 2, 1, 3)), (B * self.heads, T, self.head_dim))

    def forward(self, x: Tensor, return_attention: bool = False):
        """x: (B, T, d). No masking: every frame attends to every frame."""
        B, T, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = ops.matmul(q, ops.permute(k, (0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        attn = ops.softmax(logits, axis=-1)
        ctx = ops.matmul(attn, v)
        ctx = ops.permute(ops.reshape(ctx, (B, self.heads, T, self.head_dim)), (0, 2, 1, 3))
        out = self.o(ops.reshape(ctx, (B, T, d)))
        return (out, attn) if return_attention else out


class EncoderLayer(Module):
    """Pre-norm layer: x + MHSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim: int, heads: int, ffn_mult: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ffn_mult * dim, rng)
        self.ff2 = Linear(ffn_mult * dim, dim, rng)
        self.drop = Dropout(dropout, np.random.default_rng(rng.integers(2**63)))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.ff2(ops.relu(self.ff1(self.ln2(x)))))


class TransBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList(
            [
                EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.dropout, rng)
                for _ in range(cfg.layers_per_block)
            ]
        )

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def mean_std_pool(x: Tensor) -> Tensor:
    """(B, T, d) -> (B, 2d) of [mean, std] over time."""
    mu = ops.mean(x, 1, keepdims=True)
    std = ops.sqrt(ops.mean(ops.square(x - mu), 1) + STD_EPS)
    return ops.concat([ops.reshape(mu, (x.shape[0], x.shape[2])), std], 1)


class TransformerBranch(Module):
    """SFA -> stride-2 conv stem + positions -> three TransBlocks -> LN -> pool -> FC.

    Taps and bridge inputs use the (B, T_Tr, d) layout.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.d_model = cfg.d_model
        self.stride = cfg.stem_stride
        self.use_posenc = cfg.use_posenc
        self.sfa = SFA(cfg.n_mels, cfg.sfa_factor, rng)
        self.stem = Conv1d(cfg.n_mels, cfg.d_model, 3, rng, stride=cfg.stem_stride, padding=1)
        self.blocks = ModuleList([TransBlock(cfg, rng) for _ in range(3)])
        self.norm = LayerNorm(cfg.d_model)
        self.fc = Linear(2 * cfg.d_model, cfg.embed_dim, rng)

    def stem_output(self, feat: Tensor) -> Tensor:
        """(B, F, T) features -> (B, T_Tr, d) before positions are added."""
        if feat.ndim == 2:
            feat = ops.reshape(feat, (1,) + feat.shape)
        return ops.permute(self.stem(self.sfa(feat)), (0, 2, 1))

    def entry(self, feat: Tensor) -> Tensor:
        x = self.stem_output(feat)
        if self.use_posenc:
            x = x + Tensor(sinusoidal_positions(x.shape[1], self.d_model)[None])
        return x

    def embed(self, last_tap: Tensor) -> Tensor:
        return self.fc(mean_std_pool(self.norm(last_tap)))

    def encode(self, x: Tensor, bridges: Optional[Sequence[Optional[Tensor]]] = None):
        bridges = list(bridges) if bridges is not None else [None, None]
        if len(bridges) != 2:
            raise DimensionError("Transformer branch takes exactly two bridge inputs")
        taps = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0 and bridges[i - 1] is not None:
                h = add_bridge(h, bridges[i - 1], f"transformer bridge {i}")
            h = block(h)
            taps.append(h)
        return tuple(taps), self.embed(taps[-1])

    def forward(self, feat: Tensor, bridges: Optional[Sequence[Optional[Tensor]]] = None):
        """Return ((X', X'', X'''), embedding)."""
        return self.encode(self.entry(feat), bridges)
