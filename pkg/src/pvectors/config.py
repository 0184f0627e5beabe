"""Architecture hyperparameters and the two presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from pvectors.errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural knob of the two-branch model.

    ``full`` is the 512-channel configuration, with the usual ECAPA and
    Transformer defaults for sizes not pinned down otherwise; ``toy`` is small
    enough for finite-difference checks and CPU training runs.
    """

    preset: str = "toy"
    n_mels: int = 24
    tdnn_channels: int = 64
    res2_scale: int = 8
    se_bottleneck: int = 16
    asp_bottleneck: int = 16
    dilations: tuple = (2, 3, 4)
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    layers_per_block: int = 3
    stem_stride: int = 2
    use_posenc: bool = True
    embed_dim: int = 32
    sfa_factor: int = 2
    gate_init: float = 0.0
    dropout: float = 0.1

    def __post_init__(self):
        ints = dict(
            n_mels=self.n_mels,
            tdnn_channels=self.tdnn_channels,
            res2_scale=self.res2_scale,
            se_bottleneck=self.se_bottleneck,
            asp_bottleneck=self.asp_bottleneck,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ffn_mult=self.ffn_mult,
            layers_per_block=self.layers_per_block,
            stem_stride=self.stem_stride,
            embed_dim=self.embed_dim,
            sfa_factor=self.sfa_factor,
        )
        for name, value in ints.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.tdnn_channels % self.res2_scale:
            raise ConfigError("tdnn_channels must be divisible by res2_scale")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if len(self.dilations) != 3 or any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be three positive integers")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def agg_channels(self) -> int:
        return 3 * self.tdnn_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


TOY = ModelConfig()

FULL = ModelConfig(
    preset="full",
    n_mels=80,
    tdnn_channels=512,
    res2_scale=8,
    se_bottleneck=128,
    asp_bottleneck=128,
    d_model=256,
    n_heads=4,
    embed_dim=192,
    sfa_factor=4,
)

PRESETS = {"toy": TOY, "full": FULL}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
