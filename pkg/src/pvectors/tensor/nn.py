"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from pvectors.errors import ConfigError, DimensionError
from pvectors.tensor import ops
from pvectors.tensor.tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class with torch-like parameter discovery by attribute traversal.

    Parameters, sub-modules and lists of sub-modules assigned as attributes are
    found in assignment order, giving stable dotted names such as
    ``tdnn.blocks.0.conv_in.weight``. Non-trainable state (batch-norm running
    statistics) lives in ``self._buffers``.
    """

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, ModuleList):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = prefix + name
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, value in self._children():
            if not isinstance(value, Parameter):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if not isinstance(value, Parameter):
                yield from value.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into this module; returns the names that were not loaded.

        With ``strict`` any unknown or missing name raises ``KeyError`` listing them all.
        """
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        unknown = sorted(set(state) - set(targets))
        missing = sorted(set(targets) - set(state))
        if strict and (unknown or missing):
            raise KeyError(f"state mismatch; unknown: {unknown}, missing: {missing}")
        for name, value in state.items():
            if name not in targets:
                continue
            dst = targets[name]
            if dst.shape != np.shape(value):
                raise DimensionError(f"{name}: expected shape {dst.shape}, got {np.shape(value)}")
            dst[...] = value
        return missing


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(_uniform(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = y + ops.reshape(self.bias, (1,) * (x.ndim - 1) + self.bias.shape)
        return y


class Conv1d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        padding: int = 0,
    ):
        super().__init__()
        fan_in = c_in * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in))
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, padding: int = 0):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in))
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.padding)


class BatchNorm1d(Module):
    """Batch norm over (B, C) or (B, C, T); running stats start at mean 0, var 1."""

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.momentum = momentum
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm1d(
            x,
            self.weight,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
        )


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.rng, self.training)
