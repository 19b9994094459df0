"""Architecture hyperparameters and their flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

CORES = ("transformer", "bilstm")
TASKS = ("classify", "forecast", "impute")
# column order of the ablation table
VARIANTS = ("Full", "NoCNN", "NoCore", "NoSE", "NoMHTA", "NoGatedFusion")


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    heads: int = 8
    model_dim: int = 64
    ffn_dim: int = 256


@dataclass(frozen=True)
class BiLSTMConfig:
    layers: int = 2
    hidden_per_dir: int = 64


@dataclass(frozen=True)
class MstnConfig:
    input_dim: int = 1
    seq_len: int = 96
    core: str = "transformer"
    conv_channels: tuple = (128, 64)
    conv_kernels: tuple = (7, 5)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    bilstm: BiLSTMConfig = field(default_factory=BiLSTMConfig)
    se_reduction: int = 8
    mhta_heads: int = 4
    dropout: float = 0.3
    task: str = "classify"
    num_classes: int = 2
    horizon: int = 96
    head_rank: int = 8
    variant: str = "Full"
    precision: int = 32
    seed: int = 0

    # ----------------------------------------------------------- derived widths
    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def uses_cnn(self) -> bool:
        return self.variant != "NoCNN"

    @property
    def uses_core(self) -> bool:
        return self.variant != "NoCore"

    @property
    def cnn_out_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def core_out_dim(self) -> int:
        if self.core == "transformer":
            return self.transformer.model_dim
        return 2 * self.bilstm.hidden_per_dir

    @property
    def fused_dim(self) -> int:
        return self.cnn_out_dim * self.uses_cnn + self.core_out_dim * self.uses_core

    @property
    def out_len(self) -> int:
        """Number of output time steps of the sequence heads."""
        return self.horizon if self.task == "forecast" else self.seq_len

    # --------------------------------------------------------------- validation
    def validate(self) -> "MstnConfig":
        problems = []
        if self.input_dim < 1 or self.seq_len < 1:
            problems.append("input_dim and seq_len must be positive")
        if self.core not in CORES:
            problems.append(f"core must be one of {CORES}, got {self.core!r}")
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}, got {self.task!r}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.conv_channels) != 2 or len(self.conv_kernels) != 2:
            problems.append("conv_channels and conv_kernels need exactly two entries")
        elif any(k % 2 == 0 or k < 1 for k in self.conv_kernels):
            problems.append(f"conv kernels must be odd, got {self.conv_kernels}")
        if self.core == "transformer" and self.transformer.model_dim % self.transformer.heads:
            problems.append("transformer.model_dim must be divisible by transformer.heads")
        d = self.fused_dim if not problems else 0
        if d and d % self.mhta_heads:
            problems.append(f"fused width d={d} must be divisible by mhta_heads={self.mhta_heads}")
        if d and self.variant != "NoSE" and d % self.se_reduction:
            problems.append(f"fused width d={d} must be divisible by se_reduction={self.se_reduction}")
        if not 0 <= self.dropout < 1:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.task == "classify" and self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.task == "forecast" and self.horizon < 1:
            problems.append("horizon must be >= 1")
        if self.task != "classify" and self.head_rank < 1:
            problems.append("head_rank must be >= 1")
        if self.precision not in (32, 64):
            problems.append(f"precision must be 32 or 64, got {self.precision}")
        if problems:
            raise ConfigError("invalid MstnConfig: " + "; ".join(problems))
        return self

    # ----------------------------------------------------------------- updates
    def replace(self, **changes) -> "MstnConfig":
        """Copy with changes; dotted keys (``transformer.layers``) reach nested blocks."""
        top: dict = {}
        nested: dict[str, dict] = {}
        for key, value in changes.items():
            head, _, rest = key.replace("__", ".").partition(".")
            if rest:
                nested.setdefault(head, {})[rest] = value
            else:
                top[key] = value
        for head, sub in nested.items():
            top[head] = dataclasses.replace(getattr(self, head), **sub)
        return dataclasses.replace(self, **top)

    # ---------------------------------------------------------------- text I/O
    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in flat_items(self))

    @classmethod
    def from_text(cls, text: str, base: "MstnConfig | None" = None) -> "MstnConfig":
        base = base or cls()
        return base.replace(**parse_pairs(text, base)).validate()

    @classmethod
    def load(cls, path: str | Path, base: "MstnConfig | None" = None) -> "MstnConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, base)


def flat_items(cfg) -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            items.extend((f"{f.name}.{k}", v) for k, v in flat_items(value))
        elif isinstance(value, tuple):
            items.append((f.name, ",".join(str(v) for v in value)))
        else:
            items.append((f.name, str(value)))
    return items


def _field_types(cfg) -> dict[str, type]:
    types = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            types.update({f"{f.name}.{k}": t for k, t in _field_types(value).items()})
        else:
            types[f.name] = type(value)
    return types


def _coerce(key: str, raw: str, kind: type):
    try:
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None
    if key == "variant":
        for v in VARIANTS:
            if v.lower() == raw.lower():
                return v
        raise ConfigError(f"unknown variant {raw!r}; valid: {', '.join(VARIANTS)}")
    return raw.lower() if key in ("core", "task") else raw


def parse_pairs(text: str, base: MstnConfig) -> dict:
    types = _field_types(base)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, types[key])
    return out


def make_ablated(cfg: MstnConfig, variant: str) -> MstnConfig:
    """The same config with one component removed (see :data:`VARIANTS`)."""
    match = [v for v in VARIANTS if v.lower() == str(variant).lower()]
    if not match:
        raise ConfigError(f"unknown ablation variant {variant!r}; valid: {', '.join(VARIANTS)}")
    return cfg.replace(variant=match[0]).validate()
