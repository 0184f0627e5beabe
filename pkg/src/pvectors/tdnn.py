"""Local-feature branch: SFA front end and an ECAPA-style stack of SE-Res2Blocks."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from pvectors.config import ModelConfig
from pvectors.errors import ConfigError, DimensionError
from pvectors.sfa import SFA
from pvectors.tensor import BatchNorm1d, Conv1d, Linear, Module, ModuleList, Tensor, ops

STD_EPS = 1e-9


class SqueezeExcite(Module):
    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, bottleneck, rng)
        self.fc2 = Linear(bottleneck, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        s = ops.pool(x, 2, "mean")
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(s))))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gate(x)
        return x * ops.reshape(g, g.shape + (1,))


class ConvBN(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, c_in, c_out, kernel, rng, dilation=1, padding=0):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, kernel, rng, dilation=dilation, padding=padding)
        self.bn = BatchNorm1d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class SERes2Block(Module):
    """1x1 conv, hierarchical Res2Net dilated convs, 1x1 conv, SE gate, residual.

    Group 1 passes through; group i >= 2 is conv(group_i + out_{i-1}).
    """

    def __init__(
        self,
        channels: int,
        scale: int,
        dilation: int,
        se_bottleneck: int,
        rng: np.random.Generator,
        kernel: int = 3,
    ):
        super().__init__()
        if channels % scale:
            raise ConfigError(f"channels {channels} not divisible by scale {scale}")
        width = channels // scale
        self.scale = scale
        self.conv_in = ConvBN(channels, channels, 1, rng)
        pad = dilation * (kernel - 1) // 2
        self.convs = ModuleList(
            [ConvBN(width, width, kernel, rng, dilation=dilation, padding=pad) for _ in range(scale - 1)]
        )
        self.conv_out = ConvBN(channels, channels, 1, rng)
        self.se = SqueezeExcite(channels, se_bottleneck, rng)

    def body(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        groups = ops.split(h, self.scale, 1) if self.scale > 1 else [h]
        outs = [groups[0]]
        for conv, g in zip(self.convs, groups[1:]):
            outs.append(conv(g + outs[-1]))
        h = ops.concat(outs, 1) if len(outs) > 1 else outs[0]
        return self.conv_out(h)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.se(self.body(x))


class AttentiveStatsPool(Module):
    """Channel-wise attention over time, returning [weighted mean, weighted std]."""

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.attn_in = Conv1d(channels, bottleneck, 1, rng)
        self.attn_out = Conv1d(bottleneck, channels, 1, rng)

    def weights(self, x: Tensor) -> Tensor:
        return ops.softmax(self.attn_out(ops.tanh(self.attn_in(x))), axis=2)

    def forward(self, x: Tensor) -> Tensor:
        alpha = self.weights(x)
        mu = ops.sum(alpha * x, 2, keepdims=True)
        centred = x - mu
        var = ops.sum(alpha * ops.square(centred), 2)
        std = ops.sqrt(var + STD_EPS)
        return ops.concat([ops.reshape(mu, mu.shape[:2]), std], 1)


class TdnnBranch(Module):
    """SFA -> stem conv -> three SE-Res2Blocks -> aggregation -> ASP -> FC.

    ``forward`` takes optional bridge inputs added before blocks 2 and 3; missing
    bridges count as zeros, which is the standalone (stage-1) configuration.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        C = cfg.tdnn_channels
        self.channels = C
        self.sfa = SFA(cfg.n_mels, cfg.sfa_factor, rng)
        self.stem = ConvBN(cfg.n_mels, C, 5, rng, padding=2)
        self.blocks = ModuleList(
            [SERes2Block(C, cfg.res2_scale, d, cfg.se_bottleneck, rng) for d in cfg.dilations]
        )
        self.agg = Conv1d(3 * C, cfg.agg_channels, 1, rng)
        self.asp = AttentiveStatsPool(cfg.agg_channels, cfg.asp_bottleneck, rng)
        self.fc = Linear(2 * cfg.agg_channels, cfg.embed_dim, rng)

    def entry(self, feat: Tensor) -> Tensor:
        if feat.ndim == 2:
            feat = ops.reshape(feat, (1,) + feat.shape)
        return self.stem(self.sfa(feat))

    def embed(self, taps: Sequence[Tensor]) -> Tensor:
        h = ops.relu(self.agg(ops.concat(list(taps), 1)))
        return self.fc(self.asp(h))

    def forward(self, feat: Tensor, bridges: Optional[Sequence[Optional[Tensor]]] = None):
        """Return ((X', X'', X'''), embedding)."""
        bridges = list(bridges) if bridges is not None else [None, None]
        if len(bridges) != 2:
            raise DimensionError("TDNN branch takes exactly two bridge inputs")
        x = self.entry(feat)
        taps = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0 and bridges[i - 1] is not None:
                h = add_bridge(h, bridges[i - 1], f"tdnn bridge {i}")
            h = block(h)
            taps.append(h)
        return tuple(taps), self.embed(taps)


def add_bridge(x: Tensor, bridge: Tensor, name: str) -> Tensor:
    if bridge.shape != x.shape:
        raise DimensionError(f"{name}: expected shape {x.shape}, got {bridge.shape}")
    return x + bridge
