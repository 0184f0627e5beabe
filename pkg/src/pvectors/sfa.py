"""Spatial frequency-channel attention."""

from __future__ import annotations

import numpy as np

from pvectors.errors import DimensionError
from pvectors.tensor import Conv1d, Conv2d, Module, Tensor, ops


class SFA(Module):
    """Re-scale an expanded feature map with a 2-D attention over (group, frequency).

    The input (B, F, T) is expanded to k*F channels with a 1x1 conv. Average and
    max pooling over time give two k*F vectors; each is laid out as a k x F map
    (row i holds expanded channels i*F .. i*F+F-1, so column f always tracks
    frequency bin f). The two maps are stacked as channels of a 3x3 conv2d whose
    sigmoid output gates the expanded features before a 1x1 conv reduces them
    back to F channels.
    """

    def __init__(self, n_freq: int, factor: int, rng: np.random.Generator):
        super().__init__()
        if factor < 1:
            raise DimensionError("SFA expansion factor must be >= 1")
        self.n_freq, self.factor = n_freq, factor
        self.expand = Conv1d(n_freq, factor * n_freq, 1, rng)
        self.map_conv = Conv2d(2, 1, 3, rng, padding=1)
        self.reduce = Conv1d(factor * n_freq, n_freq, 1, rng)

    def attention(self, expanded: Tensor) -> Tensor:
        """(B, k*F, T) expanded features -> (B, 1, k, F) attention map in (0, 1)."""
        B = expanded.shape[0]
        k, F = self.factor, self.n_freq
        avg = ops.reshape(ops.pool(expanded, 2, "mean"), (B, 1, k, F))
        peak = ops.reshape(ops.pool(expanded, 2, "max"), (B, 1, k, F))
        return ops.sigmoid(self.map_conv(ops.concat([avg, peak], 1)))

    def forward(self, x: Tensor, return_attention: bool = False):
        squeeze = x.ndim == 2
        if squeeze:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.n_freq:
            raise DimensionError(f"SFA expects (B, {self.n_freq}, T) input, got {x.shape}")
        B = x.shape[0]
        expanded = self.expand(x)
        attn = self.attention(expanded)
        gated = expanded * ops.reshape(attn, (B, self.factor * self.n_freq, 1))
        out = self.reduce(gated)
        if squeeze:
            out = ops.reshape(out, out.shape[1:])
        return (out, attn) if return_attention else out
