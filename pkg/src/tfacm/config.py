"""Model hyperparameters, presets and the ``key=value`` config file format."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import StftConfig


@dataclass(frozen=True)
class SeparatorConfig:
    n_speakers: int = 2
    channels: int = 64          # N
    blocks: int = 2             # B
    f_width: int = 4            # W1
    f_stride: int = 1           # S1
    t_width: int = 4            # W2
    t_stride: int = 4           # S2
    hidden: int = 64            # H
    heads: int = 4
    attn_channels: int = 4      # E
    output_activation: str = "linear"

    def __post_init__(self):
        for name in ("n_speakers", "channels", "blocks", "f_width", "f_stride",
                     "t_width", "t_stride", "hidden", "heads", "attn_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.t_width != self.t_stride:
            raise ValueError(
                f"t_width ({self.t_width}) must equal t_stride ({self.t_stride}); "
                "overlapping time segments would leak future frames through the cache relay"
            )
        if self.f_stride > self.f_width:
            raise ValueError("f_stride must not exceed f_width")
        if self.output_activation not in ("linear", "relu"):
            raise ValueError(f"output_activation must be 'linear' or 'relu', got {self.output_activation!r}")


PRESETS = {
    "large": SeparatorConfig(channels=128, blocks=3, hidden=64, heads=2),
    "small": SeparatorConfig(channels=64, blocks=2, hidden=64, heads=4),
}

# Values reported for each preset, shown next to our own accounting.
PUBLISHED_TABLE = {
    "large": {"params_m": 1.0, "macs_g_per_s": 36.5, "time_ms": 57.00},
    "small": {"params_m": 0.5, "macs_g_per_s": 19.4, "time_ms": 45.17},
}


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "small"
    stft: StftConfig = field(default_factory=StftConfig)
    sep: SeparatorConfig = field(default_factory=lambda: PRESETS["small"])

    def __post_init__(self):
        if self.preset not in ("large", "small", "custom"):
            raise ValueError(f"unknown preset {self.preset!r}")
        n_freqs = self.stft.n_freqs
        if self.sep.f_width > n_freqs:
            raise ValueError(f"f_width {self.sep.f_width} exceeds {n_freqs} frequency bins")
        embed = self.sep.attn_channels * n_freqs
        if embed % self.sep.heads:
            raise ValueError(
                f"attention embedding {self.sep.attn_channels}x{n_freqs}={embed} "
                f"not divisible by {self.sep.heads} heads"
            )

    @property
    def sample_rate(self):
        return self.stft.sample_rate

    @property
    def n_freqs(self):
        return self.stft.n_freqs

    @classmethod
    def from_preset(cls, name):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
        return cls(preset=name, sep=PRESETS[name])

    def to_dict(self):
        out = {"preset": self.preset}
        out.update(dataclasses.asdict(self.stft))
        out.update(dataclasses.asdict(self.sep))
        return out

    def dumps(self):
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def loads(cls, text):
        """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in raw:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        preset = raw.pop("preset", "custom")
        base = cls.from_preset(preset) if preset in PRESETS else cls(preset="custom")
        stft_fields = {f.name: f.type for f in dataclasses.fields(StftConfig)}
        sep_fields = {f.name: f.type for f in dataclasses.fields(SeparatorConfig)}
        unknown = sorted(set(raw) - set(stft_fields) - set(sep_fields))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")

        def convert(name, value, default):
            if isinstance(default, int) and not isinstance(value, int):
                try:
                    return int(value)
                except ValueError:
                    raise ValueError(f"{name} must be an integer, got {value!r}") from None
            return value

        stft_kw = {k: convert(k, v, getattr(base.stft, k)) for k, v in raw.items() if k in stft_fields}
        sep_kw = {k: convert(k, v, getattr(base.sep, k)) for k, v in raw.items() if k in sep_fields}
        stft = dataclasses.replace(base.stft, **stft_kw)
        sep = dataclasses.replace(base.sep, **sep_kw)
        if preset in PRESETS and (stft != base.stft or sep != base.sep):
            preset = "custom"
        elif preset not in PRESETS and preset != "custom":
            raise ValueError(f"unknown preset {preset!r}")
        return cls(preset=preset, stft=stft, sep=sep)


def resolve_config(spec):
    """A preset name, a path to a config file, or a ``ModelConfig``."""
    if isinstance(spec, ModelConfig):
        return spec
    if spec in PRESETS:
        return ModelConfig.from_preset(spec)
    path = Path(spec)
    if path.is_file():
        return ModelConfig.loads(path.read_text(encoding="utf-8"))
    raise ValueError(f"unknown preset or missing config file: {spec!r}")
