"""Latent sampling and the HiFi-GAN style waveform decoder."""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm

from .encoders import DimensionMismatch, GaussianSequence


def reparameterize(
    dist: GaussianSequence,
    noise_scale: float = 1.0,
    rng: Union[int, torch.Generator, None] = None,
) -> torch.Tensor:
    """Draw ``z = mean + noise_scale * exp(0.5 * logvar) * eps``.

    ``rng`` may be an integer seed or a ``torch.Generator``; a seed makes
    the draw reproducible. ``noise_scale`` of 1 is the plain
    reparameterisation trick, 0 returns the mean.
    """
    if not 0.0 <= noise_scale <= 1.0:
        raise ValueError("noise_scale must lie in [0, 1]")
    if noise_scale == 0.0:
        return dist.mean.clone()
    if isinstance(rng, int):
        rng = torch.Generator(device=dist.mean.device).manual_seed(rng)
    eps = torch.randn(
        dist.mean.shape, generator=rng, dtype=dist.mean.dtype, device=dist.mean.device
    )
    return dist.mean + noise_scale * torch.exp(0.5 * dist.logvar) * eps


def _same_padding(kernel_size: int, dilation: int = 1) -> int:
    return dilation * (kernel_size - 1) // 2


class ResBlock(nn.Module):
    """One MRF branch: dilated conv pairs with residual connections."""

    def __init__(self, channels, kernel_size=3, dilations=(1, 3, 5), leaky_slope=0.1):
        super().__init__()
        self.leaky_slope = leaky_slope
        self.convs1 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=_same_padding(kernel_size, d)))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, padding=_same_padding(kernel_size)))
            for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            h = c1(F.leaky_relu(x, self.leaky_slope))
            h = c2(F.leaky_relu(h, self.leaky_slope))
            x = x + h
        return x


class InterpolationUpsample(nn.Module):
    """Nearest-neighbour interpolation by ``factor`` followed by a length-preserving conv."""

    def __init__(self, in_channels, out_channels, factor):
        super().__init__()
        self.factor = factor
        kernel_size = 2 * factor + 1
        self.conv = weight_norm(nn.Conv1d(in_channels, out_channels, kernel_size, padding=factor))

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=self.factor, mode="nearest"))


class Decoder(nn.Module):
    """Latent frames plus a speaker vector to waveform samples in (-1, 1)."""

    def __init__(
        self,
        latent_channels: int = 192,
        speaker_channels: int = 256,
        base_channels: int = 512,
        upsample_factors: Sequence[int] = (8, 8, 2, 2),
        mrf_kernel_sizes: Sequence[int] = (3, 7, 11),
        mrf_dilations: Sequence[Sequence[int]] = ((1, 3, 5), (1, 3, 5), (1, 3, 5)),
        leaky_slope: float = 0.1,
    ):
        super().__init__()
        assert len(mrf_kernel_sizes) == len(mrf_dilations)
        self.latent_channels = latent_channels
        self.speaker_channels = speaker_channels
        self.upsample_factors = tuple(upsample_factors)
        self.hop = math.prod(self.upsample_factors)
        self.leaky_slope = leaky_slope
        self.n_kernels = len(mrf_kernel_sizes)

        self.conv_pre = weight_norm(nn.Conv1d(latent_channels, base_channels, 7, padding=3))
        self.cond = nn.Conv1d(speaker_channels, base_channels, 1)
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        ch = base_channels
        for factor in self.upsample_factors:
            out_ch = max(ch // 2, 1)
            self.ups.append(InterpolationUpsample(ch, out_ch, factor))
            for k, d in zip(mrf_kernel_sizes, mrf_dilations):
                self.resblocks.append(ResBlock(out_ch, k, d, leaky_slope))
            ch = out_ch
        self.conv_post = weight_norm(nn.Conv1d(ch, 1, 7, padding=3))

    def forward(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """``z``: [B, d_z, T], ``s``: [B, d_s] -> waveform [B, T * hop]."""
        if z.shape[1] != self.latent_channels:
            raise DimensionMismatch(f"expected d_z={self.latent_channels}, got {z.shape[1]}")
        if s.shape[-1] != self.speaker_channels:
            raise DimensionMismatch(f"expected d_s={self.speaker_channels}, got {s.shape[-1]}")
        if z.shape[-1] < 1:
            raise ValueError("latent sequence is empty")
        x = self.conv_pre(z) + self.cond(s[:, :, None])
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, self.leaky_slope))
            blocks = self.resblocks[i * self.n_kernels : (i + 1) * self.n_kernels]
            x = sum(block(x) for block in blocks) / self.n_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x).squeeze(1)


def decode(z: torch.Tensor, s: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    return decoder(z, s)
