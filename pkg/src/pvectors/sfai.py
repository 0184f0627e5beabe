"""Feature soft-aligning bridges and the coupled two-branch forward pass."""

from __future__ import annotations

from typing import Optional

import numpy as np

from pvectors.errors import DimensionError
from pvectors.tdnn import TdnnBranch
from pvectors.tensor import BatchNorm1d, Conv1d, LayerNorm, Module, Parameter, Tensor, ops
from pvectors.transformer import TransformerBranch


class FSB1(Module):
    """TDNN (B, C, T_Td) -> Transformer complement (B, T_Tr, d).

    LN over channels of the source, one strided conv aligning channels and
    frames, BN on the target channels, permute, then the sigmoid(V1) gate.
    """

    def __init__(self, c_td: int, d_tr: int, stride: int, rng: np.random.Generator, gate_init: float = 0.0):
        super().__init__()
        self.stride = stride
        self.ln = LayerNorm(c_td)
        self.conv = Conv1d(c_td, d_tr, 3, rng, stride=stride, padding=1)
        self.bn = BatchNorm1d(d_tr)
        self.gate = Parameter(np.full(d_tr, float(gate_init)))

    def aligned(self, x: Tensor) -> Tensor:
        h = ops.permute(self.ln(ops.permute(x, (0, 2, 1))), (0, 2, 1))
        return ops.permute(self.bn(self.conv(h)), (0, 2, 1))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.ln.weight.shape[0]:
            raise DimensionError(f"FSB1 expects (B, {self.ln.weight.shape[0]}, T), got {x.shape}")
        a = self.aligned(x)
        return a * ops.reshape(ops.sigmoid(self.gate), (1, 1, a.shape[2]))


class FSB2(Module):
    """Transformer (B, T_Tr, d) -> TDNN complement (B, C, T_Td).

    LN over the model dim of the source, permute, nearest upsampling in time,
    a 1x1 conv to the TDNN width, BN on the target channels, sigmoid(V2) gate.
    """

    def __init__(self, d_tr: int, c_td: int, factor: int, rng: np.random.Generator, gate_init: float = 0.0):
        super().__init__()
        self.factor = factor
        self.ln = LayerNorm(d_tr)
        self.conv = Conv1d(d_tr, c_td, 1, rng)
        self.bn = BatchNorm1d(c_td)
        self.gate = Parameter(np.full(c_td, float(gate_init)))

    def aligned(self, x: Tensor) -> Tensor:
        h = ops.permute(self.ln(x), (0, 2, 1))
        return self.bn(self.conv(ops.upsample_nearest(h, self.factor)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.ln.weight.shape[0]:
            raise DimensionError(f"FSB2 expects (B, T, {self.ln.weight.shape[0]}), got {x.shape}")
        a = self.aligned(x)
        return a * ops.reshape(ops.sigmoid(self.gate), (1, a.shape[1], 1))


# Prerequisites of every quantity in the coupled recurrences.
DEPENDENCIES = {
    "X_Td": (),
    "X_Tr": (),
    "X'_Td": ("X_Td",),
    "X'_Tr": ("X_Tr",),
    "C_Td": ("X'_Tr",),
    "X''_Td": ("X'_Td", "C_Td"),
    "C_Tr": ("X''_Td",),
    "X''_Tr": ("X'_Tr", "C_Tr"),
    "C'_Td": ("X''_Tr",),
    "X'''_Td": ("X''_Td", "C'_Td"),
    "C'_Tr": ("X'''_Td",),
    "X'''_Tr": ("X''_Tr", "C'_Tr"),
}

EVALUATION_ORDER = (
    "X_Td", "X_Tr", "X'_Td", "X'_Tr", "C_Td", "X''_Td",
    "C_Tr", "X''_Tr", "C'_Td", "X'''_Td", "C'_Tr", "X'''_Tr",
)  # fmt: skip


class DependencyTrace:
    """Records produced quantities and asserts each one's inputs already exist.

    ``inputs`` maps a name to the tensors that were actually consumed, so tests
    can check identity (e.g. that C_Tr was computed from the X''_Td object).
    """

    def __init__(self):
        self.order: list[str] = []
        self.values: dict[str, Tensor] = {}
        self.inputs: dict[str, tuple] = {}

    def produce(self, name: str, value: Tensor, consumed: tuple = ()) -> Tensor:
        missing = [dep for dep in DEPENDENCIES[name] if dep not in self.values]
        if missing:
            raise AssertionError(f"{name} computed before {missing}")
        self.order.append(name)
        self.values[name] = value
        self.inputs[name] = consumed
        return value


def _bridge(fsb: Module, x: Tensor, name: str) -> Tensor:
    try:
        return fsb(x)
    except DimensionError as exc:
        raise DimensionError(f"{name}: {exc}") from None


def coupled_forward(
    feat: Tensor,
    tdnn: TdnnBranch,
    trans: TransformerBranch,
    fsb1a: FSB1,
    fsb1b: FSB1,
    fsb2a: FSB2,
    fsb2b: FSB2,
    trace: Optional[DependencyTrace] = None,
) -> tuple[Tensor, Tensor]:
    """Run both branches with the four additive bridges; return (e_td, e_tr).

    Evaluation follows the data dependencies exactly: C_Td = FSB2(X'_Tr) feeds
    X''_Td, which feeds C_Tr = FSB1(X''_Td), and so on.
    """
    t = trace if trace is not None else DependencyTrace()
    if feat.ndim == 2:
        feat = ops.reshape(feat, (1,) + feat.shape)
    T = feat.shape[2]
    if T % trans.stride:
        raise DimensionError(
            f"FSB2: frame count {T} is not a multiple of the temporal factor {trans.stride}"
        )
    td1, td2, td3 = tdnn.blocks
    tr1, tr2, tr3 = trans.blocks

    x_td = t.produce("X_Td", tdnn.entry(feat))
    x_tr = t.produce("X_Tr", trans.entry(feat))
    x1_td = t.produce("X'_Td", td1(x_td), (x_td,))
    x1_tr = t.produce("X'_Tr", tr1(x_tr), (x_tr,))
    c_td = t.produce("C_Td", _bridge(fsb2a, x1_tr, "FSB2 (C_Td)"), (x1_tr,))
    x2_td = t.produce("X''_Td", td2(_add(x1_td, c_td, "C_Td")), (x1_td, c_td))
    c_tr = t.produce("C_Tr", _bridge(fsb1a, x2_td, "FSB1 (C_Tr)"), (x2_td,))
    x2_tr = t.produce("X''_Tr", tr2(_add(x1_tr, c_tr, "C_Tr")), (x1_tr, c_tr))
    c2_td = t.produce("C'_Td", _bridge(fsb2b, x2_tr, "FSB2 (C'_Td)"), (x2_tr,))
    x3_td = t.produce("X'''_Td", td3(_add(x2_td, c2_td, "C'_Td")), (x2_td, c2_td))
    c2_tr = t.produce("C'_Tr", _bridge(fsb1b, x3_td, "FSB1 (C'_Tr)"), (x3_td,))
    x3_tr = t.produce("X'''_Tr", tr3(_add(x2_tr, c2_tr, "C'_Tr")), (x2_tr, c2_tr))

    e_td = tdnn.embed((x1_td, x2_td, x3_td))
    e_tr = trans.embed(x3_tr)
    return e_td, e_tr


def _add(x: Tensor, c: Tensor, name: str) -> Tensor:
    if x.shape != c.shape:
        raise DimensionError(f"bridge {name}: expected shape {x.shape}, got {c.shape}")
    return x + c
