"""Training/model configuration and its YAML representation.

Unknown keys are rejected at every nesting level so a typo in a config
file fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import yaml

from .audio_features import FeatureConfig
from .losses import PRACTICAL_WEIGHTS, LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_speakers: Optional[int] = None  # None: taken from the training manifest
    linguistic_channels: int = 192
    speaker_channels: int = 256
    latent_channels: int = 192
    # linguistic encoder
    linguistic_source: str = "conformer"  # or "precomputed"
    linguistic_subsample: int = 1
    freeze_linguistic: bool = False
    conformer_blocks: int = 2
    conformer_heads: int = 4
    conformer_kernel: int = 15
    # prior encoder
    prior_hidden: int = 192
    prior_filter: int = 768
    prior_blocks: int = 4
    prior_heads: int = 2
    prior_kernel: int = 3
    dropout: float = 0.1
    # posterior encoder
    posterior_hidden: int = 192
    posterior_kernel: int = 5
    posterior_dilation_rate: int = 1
    posterior_layers: int = 16
    # decoder
    upsample_factors: List[int] = field(default_factory=lambda: [8, 8, 2, 2])
    mrf_kernel_sizes: List[int] = field(default_factory=lambda: [3, 7, 11])
    mrf_dilations: List[List[int]] = field(default_factory=lambda: [[1, 3, 5], [1, 3, 5], [1, 3, 5]])
    decoder_channels: int = 512
    # discriminators
    periods: List[int] = field(default_factory=lambda: [2, 3, 5, 7, 11])
    n_scales: int = 3
    mpd_channels: List[int] = field(default_factory=lambda: [32, 128, 512, 1024, 1024])
    msd_channels: List[int] = field(default_factory=lambda: [128, 128, 256, 512, 1024, 1024, 1024])

    def __post_init__(self):
        if self.linguistic_source not in ("conformer", "precomputed"):
            raise ConfigError(f"unknown linguistic_source {self.linguistic_source!r}")
        if self.linguistic_subsample < 1:
            raise ConfigError("linguistic_subsample must be >= 1")


@dataclass
class TrainConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    segment_frames: int = 32
    batch_size: int = 1
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: Tuple[float, float] = (0.8, 0.99)
    lr_decay: float = 0.999
    total_steps: int = 100000
    seed: int = 1234
    num_workers: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 10000

    def __post_init__(self):
        self.betas = tuple(self.betas)
        hop = math.prod(self.model.upsample_factors)
        if hop != self.features.frame_hop:
            raise ConfigError(
                f"product of upsample_factors ({hop}) must equal frame_hop ({self.features.frame_hop})"
            )
        if self.segment_frames < 8:
            raise ConfigError("segment_frames must be >= 8")
        if self.segment_frames * self.features.frame_hop < self.features.fft_size:
            raise ConfigError("a segment must span at least one fft window")
        if min(self.lr_g, self.lr_d) <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("learning rates must be > 0 and lr_decay in (0, 1]")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """Reduced widths for CPU smoke runs; features keep their defaults."""
        model = ModelConfig(
            linguistic_channels=32,
            speaker_channels=16,
            latent_channels=16,
            conformer_blocks=1,
            conformer_heads=2,
            conformer_kernel=7,
            prior_hidden=32,
            prior_filter=64,
            prior_blocks=2,
            prior_heads=2,
            dropout=0.0,
            posterior_hidden=32,
            posterior_layers=4,
            decoder_channels=64,
            mrf_kernel_sizes=[3, 7],
            mrf_dilations=[[1, 3], [1, 3]],
            mpd_channels=[4, 8, 16, 32, 32],
            msd_channels=[8, 8, 16, 16, 32, 32, 32],
        )
        base = cls(model=model, lr_g=1e-3, lr_d=1e-3)
        return dataclasses.replace(base, **overrides)

    @classmethod
    def practical(cls, **overrides) -> "TrainConfig":
        """Default widths with the recon x45 / fm x2 weighting."""
        return dataclasses.replace(cls(weights=dataclasses.replace(PRACTICAL_WEIGHTS)), **overrides)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    nested = {"features": FeatureConfig, "model": ModelConfig, "weights": LossWeights}
    kwargs = {}
    for key, value in data.items():
        if key in nested and cls is TrainConfig:
            kwargs[key] = _build(nested[key], value, f"{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def load_config(path) -> TrainConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
