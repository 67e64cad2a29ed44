"""Run configuration: dataclasses, YAML loading, and config hashing.

Every default reproduces the reference training setup, so an empty override
file is a complete configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import ConfigError


@dataclass
class FlowConfig:
    n_blocks: int = 20
    squeeze_factor: int = 12
    subnet_layers: int = 8
    subnet_channels: int = 128
    subnet_kernel: int = 3
    cond_channels: int = 256
    early_output_every: int = 4
    early_output_channels: int = 2

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.squeeze_factor < 2:
            raise ConfigError("squeeze_factor must be >= 2")
        if self.subnet_kernel % 2 == 0:
            raise ConfigError("subnet_kernel must be odd")
        if self.early_output_every < 0 or self.early_output_channels < 0:
            raise ConfigError("early output schedule fields must be >= 0")
        for b, c in enumerate(self.block_channels()):
            if c < 2 or c % 2 != 0:
                raise ConfigError(
                    f"flow block {b} would run on {c} channels; each block "
                    "needs an even channel count >= 2 (early-output schedule "
                    "drains too many channels)"
                )

    def early_split_blocks(self) -> list[int]:
        """0-based block indices before which channels are routed to z."""
        if self.early_output_every <= 0 or self.early_output_channels <= 0:
            return []
        return [
            b
            for b in range(self.n_blocks)
            if b > 0 and b % self.early_output_every == 0
        ]

    def block_channels(self) -> list[int]:
        """Active channel count entering each flow block."""
        splits = set(self.early_split_blocks())
        channels, out = self.squeeze_factor, []
        for b in range(self.n_blocks):
            if b in splits:
                channels -= self.early_output_channels
            out.append(channels)
        return out

    def final_channels(self) -> int:
        return self.block_channels()[-1] if self.n_blocks else self.squeeze_factor


@dataclass
class CondNetConfig:
    use_cond_net: bool = True
    channel_growth: int = 24
    kernel_size: int = 15

    def validate(self) -> None:
        if self.kernel_size % 2 == 0:
            raise ConfigError("cond kernel_size must be odd")
        if self.channel_growth < 1:
            raise ConfigError("channel_growth must be >= 1")


@dataclass
class DiscEnsembleConfig:
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    scales: int = 3
    mpd_channels: int = 8
    msd_channels: int = 32
    max_channels: int = 256

    def validate(self) -> None:
        if len(self.periods) + self.scales != self.ensemble_size:
            raise ConfigError("inconsistent ensemble size")

    @property
    def ensemble_size(self) -> int:
        return len(self.periods) + self.scales


@dataclass
class ModelConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    cond: CondNetConfig = field(default_factory=CondNetConfig)
    disc: DiscEnsembleConfig = field(default_factory=DiscEnsembleConfig)

    def validate(self) -> None:
        self.flow.validate()
        self.cond.validate()
        self.disc.validate()


@dataclass
class TrainConfig:
    batch_size: int = 16
    seed: int = 0
    nf_lr: float = 1e-3
    plateau_factor: float = 0.8
    plateau_patience: int = 10
    early_stop_patience: int = 40
    nf_max_epochs: int = 300
    gan_epochs: int = 200
    g_lr: float = 5.0e-5
    d_lr: float = 2.0e-4
    adam_betas_gan: tuple[float, float] = (0.5, 0.9)
    lr_decay_gan: float = 0.8
    hybrid_weight: float = 0.3
    hybrid_combined: bool = False
    grad_clip: float = 10.0
    fm_weight: float = 2.0
    rec_weight: float = 1.0
    recon_loss: str = "mrstft"
    stft_resolutions: tuple[tuple[int, int, int], ...] = (
        (1024, 120, 600),
        (2048, 240, 1200),
        (512, 50, 240),
    )
    stft_log_floor: float = 1e-7

    def validate(self) -> None:
        for name in ("nf_lr", "g_lr", "d_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.hybrid_weight < 0:
            raise ConfigError("hybrid_weight must be >= 0")
        if not 0 < self.plateau_factor <= 1 or not 0 < self.lr_decay_gan <= 1:
            raise ConfigError("lr decay factors must lie in (0, 1]")
        if self.recon_loss not in ("mrstft", "mel", "sisdr", "mrstft+sisdr"):
            raise ConfigError(f"unknown recon_loss {self.recon_loss!r}")
        for fft, hop, win in self.stft_resolutions:
            if win > fft:
                raise ConfigError("stft window_length must be <= fft_size")
            if hop >= win:
                raise ConfigError("stft hop must be < window_length")


@dataclass
class DataConfig:
    manifest: str | None = None
    root: str = "."
    # Nearest multiple of the default squeeze factor below 16384 (~1.02 s).
    segment_samples: int = 16380
    segment_hop: int = 16380
    target_peak: float = 0.95

    def validate(self, squeeze_factor: int) -> None:
        if self.segment_samples % squeeze_factor != 0:
            raise ConfigError(
                f"segment_samples={self.segment_samples} must be divisible "
                f"by squeeze_factor={squeeze_factor}"
            )
        if self.segment_hop < 1:
            raise ConfigError("segment_hop must be >= 1")
        if not 0 < self.target_peak <= 1:
            raise ConfigError("target_peak must lie in (0, 1]")


@dataclass
class EvalConfig:
    temperature: float = 1.0
    histogram_bin_width: float = 0.05
    sisdr_cap_db: float = 100.0

    def validate(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.histogram_bin_width <= 0:
            raise ConfigError("histogram_bin_width must be > 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate(self.model.flow.squeeze_factor)
        self.eval.validate()
        largest_fft = max(fft for fft, _, _ in self.train.stft_resolutions)
        if self.data.segment_samples < largest_fft:
            raise ConfigError(
                f"segment_samples={self.data.segment_samples} is shorter than "
                f"the largest STFT resolution ({largest_fft}); no frame fits"
            )
        return self


def _coerce(value: Any) -> Any:
    # YAML gives lists where dataclasses declare tuples.
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _build(cls: type, mapping: dict[str, Any], path: str) -> Any:
    if not isinstance(mapping, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(fields)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) under {path!r}: {', '.join(sorted(unknown))}"
        )
    kwargs = {}
    for name, value in mapping.items():
        sub_path = f"{path}.{name}" if path else name
        if sub_path in _SECTION_TYPES:
            kwargs[name] = _build(_SECTION_TYPES[sub_path], value, sub_path)
        else:
            kwargs[name] = _coerce(value)
    return cls(**kwargs)


_SECTION_TYPES = {
    "model": ModelConfig,
    "model.flow": FlowConfig,
    "model.cond": CondNetConfig,
    "model.disc": DiscEnsembleConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def config_from_mapping(mapping: dict[str, Any] | None) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested mapping.

    Unknown keys anywhere in the document are rejected.
    """
    mapping = mapping or {}
    cfg = _build(RunConfig, mapping, "")
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return config_from_mapping(doc)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of a config."""
    doc = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = doc
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return config_from_mapping(doc)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    def as_plain(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj):
            return {
                f.name: as_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
            }
        if isinstance(obj, tuple):
            return [as_plain(v) for v in obj]
        return obj

    return as_plain(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable hash of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
