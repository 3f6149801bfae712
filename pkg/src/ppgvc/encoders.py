"""Linguistic, prior and posterior encoders.

Tensors follow the channel-first convention ``[batch, channels, frames]``
with an optional ``[batch, 1, frames]`` float mask marking valid frames.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class DimensionMismatch(ValueError):
    pass


@dataclass
class GaussianSequence:
    """Frame-wise diagonal Gaussian, ``mean`` and ``logvar`` both ``[B, d_z, T]``."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise DimensionMismatch(
                f"mean {tuple(self.mean.shape)} vs logvar {tuple(self.logvar.shape)}"
            )

    @property
    def frames(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


def sequence_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    steps = torch.arange(max_len, device=lengths.device)
    return steps[None, :] < lengths[:, None]


def _full_mask(x: torch.Tensor) -> torch.Tensor:
    return torch.ones(x.shape[0], 1, x.shape[-1], dtype=x.dtype, device=x.device)


def _split_gaussian(stats: torch.Tensor, mask: torch.Tensor) -> GaussianSequence:
    mean, logvar = torch.chunk(stats, 2, dim=1)
    logvar = torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)
    return GaussianSequence(mean * mask, logvar * mask)


class SinusoidalPositions(nn.Module):
    def __init__(self, channels: int, max_len: int = 10000):
        super().__init__()
        self.channels = channels
        self.max_len = max_len

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, T, C]
        t = x.shape[1]
        pos = torch.arange(t, dtype=x.dtype, device=x.device)[:, None]
        div = torch.exp(
            torch.arange(0, self.channels, 2, dtype=x.dtype, device=x.device)
            * (-math.log(self.max_len) / self.channels)
        )
        pe = torch.zeros(t, self.channels, dtype=x.dtype, device=x.device)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)[:, : self.channels // 2]
        return x + pe[None]


# ---------------------------------------------------------------------------
# Linguistic encoder
# ---------------------------------------------------------------------------


class FeedForward(nn.Module):
    def __init__(self, channels, hidden, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(channels),
            nn.Linear(channels, hidden),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, channels),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvolutionModule(nn.Module):
    def __init__(self, channels, kernel_size, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.pointwise_in = nn.Conv1d(channels, 2 * channels, 1)
        self.depthwise = nn.Conv1d(
            channels, channels, kernel_size, padding=kernel_size // 2, groups=channels
        )
        self.depth_norm = nn.GroupNorm(1, channels)
        self.pointwise_out = nn.Conv1d(channels, channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: [B, T, C]; mask: [B, 1, T]
        h = self.norm(x).transpose(1, 2) * mask
        h = F.glu(self.pointwise_in(h), dim=1) * mask
        h = F.silu(self.depth_norm(self.depthwise(h)))
        h = self.pointwise_out(h) * mask
        return self.dropout(h.transpose(1, 2))


class ConformerBlock(nn.Module):
    """Macaron feed-forward, self-attention, convolution, feed-forward."""

    def __init__(self, channels, n_heads, ff_mult=4, kernel_size=15, dropout=0.1):
        super().__init__()
        self.ff1 = FeedForward(channels, ff_mult * channels, dropout)
        self.attn_norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, n_heads, dropout=dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = ConvolutionModule(channels, kernel_size, dropout)
        self.ff2 = FeedForward(channels, ff_mult * channels, dropout)
        self.out_norm = nn.LayerNorm(channels)

    def forward(self, x, mask):
        pad = mask[:, 0] < 0.5
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad, need_weights=False)
        x = x + self.attn_dropout(h)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ConformerEncoder(nn.Module):
    """Small trainable conformer stack mapping log-mel frames to embeddings ``g``.

    Stands in for a pre-trained ASR encoder; frame rate is preserved.
    """

    def __init__(self, n_mels=80, channels=192, n_blocks=2, n_heads=4, kernel_size=15, dropout=0.1):
        super().__init__()
        self.n_mels = n_mels
        self.channels = channels
        self.input_proj = nn.Linear(n_mels, channels)
        self.positions = SinusoidalPositions(channels)
        self.blocks = nn.ModuleList(
            ConformerBlock(channels, n_heads, kernel_size=kernel_size, dropout=dropout)
            for _ in range(n_blocks)
        )

    def forward(self, mel: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mel.shape[1] != self.n_mels:
            raise DimensionMismatch(f"expected {self.n_mels} mel channels, got {mel.shape[1]}")
        if mask is None:
            mask = _full_mask(mel)
        x = self.positions(self.input_proj(mel.transpose(1, 2)))
        for block in self.blocks:
            x = block(x, mask)
        return x.transpose(1, 2) * mask


def encode_linguistic(mel: torch.Tensor, encoder: nn.Module, mask=None) -> torch.Tensor:
    return encoder(mel, mask)


# Precomputed features: u32 frames, u32 dim, then float32 row-major, little-endian.
_PPG_HEADER = struct.Struct("<II")


def write_ppg(path: Union[str, os.PathLike], features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError("linguistic features must be a [frames, dim] matrix")
    with open(path, "wb") as f:
        f.write(_PPG_HEADER.pack(*features.shape))
        f.write(features.tobytes())


def read_ppg(path: Union[str, os.PathLike]) -> np.ndarray:
    """Load a ``.ppg`` file as a ``[frames, dim]`` float32 matrix."""
    with open(path, "rb") as f:
        header = f.read(_PPG_HEADER.size)
        if len(header) != _PPG_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        frames, dim = _PPG_HEADER.unpack(header)
        body = f.read()
    if len(body) != 4 * frames * dim:
        raise ValueError(f"{path}: expected {frames}x{dim} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def align_linguistic(g: torch.Tensor, frames: int, subsample: int = 1) -> torch.Tensor:
    """Bring ``g`` ([B, d_g, T_g]) to ``frames`` frames by repeating each ``subsample`` times."""
    if subsample > 1:
        g = torch.repeat_interleave(g, subsample, dim=-1)
    if g.shape[-1] < frames:
        g = F.pad(g, (0, frames - g.shape[-1]), mode="replicate")
    return g[..., :frames]


# ---------------------------------------------------------------------------
# Prior encoder
# ---------------------------------------------------------------------------


class FFTBlock(nn.Module):
    """Feed-forward transformer block: self-attention then a 1-D conv FFN."""

    def __init__(self, channels, n_heads, filter_channels, kernel_size, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(channels)
        self.conv1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_channels, channels, 1)
        self.norm2 = nn.LayerNorm(channels)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: [B, T, C]
        pad = mask[:, 0] < 0.5
        h, _ = self.attn(x, x, x, key_padding_mask=pad, need_weights=False)
        x = self.norm1(x + self.dropout(h))
        h = x.transpose(1, 2) * mask
        h = self.conv2(self.dropout(F.relu(self.conv1(h)))) * mask
        return self.norm2(x + self.dropout(h.transpose(1, 2)))


class PriorEncoder(nn.Module):
    """Maps ``concat(g, s)`` to the prior Gaussian ``q``."""

    def __init__(
        self,
        linguistic_channels=192,
        speaker_channels=256,
        latent_channels=192,
        hidden_channels=192,
        filter_channels=768,
        n_blocks=4,
        n_heads=2,
        kernel_size=3,
        dropout=0.1,
    ):
        super().__init__()
        self.linguistic_channels = linguistic_channels
        self.speaker_channels = speaker_channels
        self.latent_channels = latent_channels
        self.pre = nn.Conv1d(linguistic_channels + speaker_channels, hidden_channels, 1)
        self.positions = SinusoidalPositions(hidden_channels)
        self.blocks = nn.ModuleList(
            FFTBlock(hidden_channels, n_heads, filter_channels, kernel_size, dropout)
            for _ in range(n_blocks)
        )
        self.proj = nn.Conv1d(hidden_channels, 2 * latent_channels, 1)

    def forward(self, g: torch.Tensor, s: torch.Tensor, mask=None) -> GaussianSequence:
        if g.shape[1] != self.linguistic_channels:
            raise DimensionMismatch(f"expected d_g={self.linguistic_channels}, got {g.shape[1]}")
        if s.shape[-1] != self.speaker_channels:
            raise DimensionMismatch(f"expected d_s={self.speaker_channels}, got {s.shape[-1]}")
        if mask is None:
            mask = _full_mask(g)
        x = torch.cat([g, s[:, :, None].expand(-1, -1, g.shape[-1])], dim=1)
        x = self.positions((self.pre(x) * mask).transpose(1, 2))
        for block in self.blocks:
            x = block(x, mask)
        return _split_gaussian(self.proj(x.transpose(1, 2)) * mask, mask)


def encode_prior(g, s, encoder: PriorEncoder, mask=None) -> GaussianSequence:
    return encoder(g, s, mask)


# ---------------------------------------------------------------------------
# Posterior encoder
# ---------------------------------------------------------------------------


class WaveNet(nn.Module):
    """Non-causal WaveNet stack with gated activations and global conditioning."""

    def __init__(self, channels, kernel_size, dilation_rate, n_layers, cond_channels=0, dropout=0.0):
        super().__init__()
        assert kernel_size % 2 == 1, "kernel size must be odd"
        self.channels = channels
        self.n_layers = n_layers
        self.kernel_size = kernel_size
        self.dilations = [dilation_rate**i for i in range(n_layers)]
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        for i, d in enumerate(self.dilations):
            conv = nn.Conv1d(channels, 2 * channels, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2)
            self.in_layers.append(nn.utils.parametrizations.weight_norm(conv))
            out = 2 * channels if i < n_layers - 1 else channels
            self.res_skip_layers.append(nn.utils.parametrizations.weight_norm(nn.Conv1d(channels, out, 1)))
        self.cond_layer = None
        if cond_channels:
            self.cond_layer = nn.utils.parametrizations.weight_norm(
                nn.Conv1d(cond_channels, 2 * channels * n_layers, 1)
            )
        self.dropout = nn.Dropout(dropout)

    @property
    def receptive_radius(self) -> int:
        return sum(d * (self.kernel_size - 1) // 2 for d in self.dilations)

    def forward(self, x, mask, cond=None):
        output = torch.zeros_like(x)
        if cond is not None and self.cond_layer is not None:
            cond = self.cond_layer(cond)
        for i in range(self.n_layers):
            h = self.in_layers[i](x)
            if cond is not None:
                h = h + cond[:, 2 * i * self.channels : 2 * (i + 1) * self.channels]
            acts = torch.tanh(h[:, : self.channels]) * torch.sigmoid(h[:, self.channels :])
            res_skip = self.res_skip_layers[i](self.dropout(acts))
            if i < self.n_layers - 1:
                x = (x + res_skip[:, : self.channels]) * mask
                output = output + res_skip[:, self.channels :]
            else:
                output = output + res_skip
        return output * mask


class PosteriorEncoder(nn.Module):
    """Maps the linear spectrogram plus speaker embedding to the posterior ``p``."""

    def __init__(
        self,
        spec_channels=513,
        speaker_channels=256,
        latent_channels=192,
        hidden_channels=192,
        kernel_size=5,
        dilation_rate=1,
        n_layers=16,
    ):
        super().__init__()
        self.spec_channels = spec_channels
        self.speaker_channels = speaker_channels
        self.latent_channels = latent_channels
        self.pre = nn.Conv1d(spec_channels, hidden_channels, 1)
        self.wavenet = WaveNet(hidden_channels, kernel_size, dilation_rate, n_layers, cond_channels=speaker_channels)
        self.proj = nn.Conv1d(hidden_channels, 2 * latent_channels, 1)

    @property
    def receptive_radius(self) -> int:
        return self.wavenet.receptive_radius

    def forward(self, spec: torch.Tensor, s: torch.Tensor, mask=None) -> GaussianSequence:
        if spec.shape[1] != self.spec_channels:
            raise DimensionMismatch(f"expected {self.spec_channels} fft bins, got {spec.shape[1]}")
        if s.shape[-1] != self.speaker_channels:
            raise DimensionMismatch(f"expected d_s={self.speaker_channels}, got {s.shape[-1]}")
        if mask is None:
            mask = _full_mask(spec)
        x = self.pre(spec) * mask
        x = self.wavenet(x, mask, cond=s[:, :, None])
        return _split_gaussian(self.proj(x) * mask, mask)


def encode_posterior(spec, s, encoder: PosteriorEncoder, mask=None) -> GaussianSequence:
    return encoder(spec, s, mask)


class SpeakerTable(nn.Module):
    """Learned embedding per training speaker."""

    def __init__(self, n_speakers: int, channels: int = 256):
        super().__init__()
        self.n_speakers = n_speakers
        self.embedding = nn.Embedding(n_speakers, channels)
        nn.init.normal_(self.embedding.weight, 0.0, channels**-0.5)

    def forward(self, speaker_ids: torch.Tensor) -> torch.Tensor:
        if torch.any(speaker_ids < 0) or torch.any(speaker_ids >= self.n_speakers):
            raise KeyError(f"speaker id out of range [0, {self.n_speakers})")
        return self.embedding(speaker_ids)
