"""Multi-period and multi-scale waveform discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

LEAKY_SLOPE = 0.1


class WaveformTooShort(ValueError):
    pass


@dataclass
class DiscriminatorOutput:
    """Scores and hidden activations of every sub-discriminator.

    ``feature_maps[t][l]`` is the activation of layer ``l`` of
    sub-discriminator ``t``; ``scores[t]`` is its final score map.
    """

    scores: List[torch.Tensor] = field(default_factory=list)
    feature_maps: List[List[torch.Tensor]] = field(default_factory=list)

    def __len__(self):
        return len(self.scores)


def fold_by_period(x: torch.Tensor, period: int) -> torch.Tensor:
    """Reflect-pad ``x`` ([B, 1, T]) to a multiple of ``period`` and fold it to
    ``[B, 1, ceil(T / period), period]`` so column ``j`` holds samples ``j, j+p, ...``."""
    b, c, t = x.shape
    if t < 2 * period:
        raise WaveformTooShort(f"need at least {2 * period} samples for period {period}, got {t}")
    rem = t % period
    if rem:
        x = F.pad(x, (0, period - rem), mode="reflect")
        t = x.shape[-1]
    return x.view(b, c, t // period, period)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels=(32, 128, 512, 1024, 1024), kernel_size=5, stride=3):
        super().__init__()
        self.period = period
        pad = (kernel_size - 1) // 2
        layers = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            s = stride if i < len(channels) - 1 else 1
            layers.append(weight_norm(nn.Conv2d(in_ch, out_ch, (kernel_size, 1), (s, 1), padding=(pad, 0))))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.conv_post = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        fmap = []
        x = fold_by_period(x, self.period)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return x.flatten(1), fmap


_MSD_LAYOUT = (
    # (kernel, stride, groups)
    (15, 1, 1),
    (41, 2, 4),
    (41, 2, 16),
    (41, 4, 16),
    (41, 4, 16),
    (41, 1, 16),
    (5, 1, 1),
)


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels=(128, 128, 256, 512, 1024, 1024, 1024), use_spectral_norm=False):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        assert len(channels) == len(_MSD_LAYOUT)
        layers = []
        in_ch = 1
        for out_ch, (k, s, g) in zip(channels, _MSD_LAYOUT):
            groups = math.gcd(g, math.gcd(in_ch, out_ch))
            layers.append(norm(nn.Conv1d(in_ch, out_ch, k, s, groups=groups, padding=(k - 1) // 2)))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.conv_post = norm(nn.Conv1d(in_ch, 1, 3, 1, padding=1))

    def forward(self, x):
        fmap = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return x.flatten(1), fmap


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), channels=(32, 128, 512, 1024, 1024)):
        super().__init__()
        self.discriminators = nn.ModuleList(PeriodDiscriminator(p, channels) for p in periods)

    def forward(self, x, out: DiscriminatorOutput):
        for d in self.discriminators:
            score, fmap = d(x)
            out.scores.append(score)
            out.feature_maps.append(fmap)


class MultiScaleDiscriminator(nn.Module):
    """Sub-discriminators on the raw waveform and on successively 2x average-pooled copies."""

    def __init__(self, n_scales=3, channels=(128, 128, 256, 512, 1024, 1024, 1024)):
        super().__init__()
        self.discriminators = nn.ModuleList(
            ScaleDiscriminator(channels, use_spectral_norm=(i == 0)) for i in range(n_scales)
        )
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, x, out: DiscriminatorOutput):
        for i, d in enumerate(self.discriminators):
            if i > 0:
                x = self.pool(x)
            score, fmap = d(x)
            out.scores.append(score)
            out.feature_maps.append(fmap)


class Discriminator(nn.Module):
    """MPD followed by MSD; ``T = len(periods) + n_scales`` sub-discriminators."""

    def __init__(
        self,
        periods: Sequence[int] = (2, 3, 5, 7, 11),
        n_scales: int = 3,
        mpd_channels: Sequence[int] = (32, 128, 512, 1024, 1024),
        msd_channels: Sequence[int] = (128, 128, 256, 512, 1024, 1024, 1024),
    ):
        super().__init__()
        self.periods = tuple(periods)
        self.n_scales = n_scales
        self.mpd = MultiPeriodDiscriminator(periods, mpd_channels)
        self.msd = MultiScaleDiscriminator(n_scales, msd_channels)

    @property
    def n_subdiscriminators(self) -> int:
        return len(self.periods) + self.n_scales

    @property
    def min_length(self) -> int:
        return max(2 * max(self.periods, default=1), 2 ** self.n_scales)

    def forward(self, w: torch.Tensor) -> DiscriminatorOutput:
        """``w``: [B, samples] or [B, 1, samples]."""
        if w.dim() == 2:
            w = w[:, None, :]
        if w.shape[-1] < self.min_length:
            raise WaveformTooShort(f"need at least {self.min_length} samples, got {w.shape[-1]}")
        out = DiscriminatorOutput()
        self.mpd(w, out)
        self.msd(w, out)
        return out


def discriminate(w: torch.Tensor, discriminator: Discriminator) -> DiscriminatorOutput:
    return discriminator(w)
