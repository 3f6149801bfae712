"""Waveform I/O and spectral features (linear and log-mel spectrograms).

All spectral code runs through torch so the same path serves feature
extraction, the posterior encoder input and the differentiable mel
reconstruction loss. Numpy-facing wrappers return ``[frames, bins]``
matrices; the torch functions keep the ``[batch, bins, frames]`` layout
used by the networks.
"""

from __future__ import annotations

import math
import os
import wave
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import resample_poly

SUPPORTED_RATES = (16000, 24000, 48000)
LOG_FLOOR = 1e-5


class AudioFormatError(ValueError):
    """Input is a WAV file this package does not read (non-PCM16 or not mono)."""


class TruncatedAudioError(ValueError):
    """WAV header or payload ends before its declared size."""


class WaveformTooShortError(ValueError):
    pass


class FeatureConfigMismatch(ValueError):
    pass


@dataclass
class Waveform:
    """Mono audio in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(
                f"sample_rate {self.sample_rate} not in {SUPPORTED_RATES}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 24000
    fft_size: int = 1024
    frame_hop: int = 256
    frame_length: int = 1024
    n_mels: int = 80
    mel_fmin: float = 0.0
    mel_fmax: Optional[float] = None

    def __post_init__(self):
        if self.mel_fmax is None:
            self.mel_fmax = self.sample_rate / 2
        if not 0 < self.frame_hop <= self.frame_length <= self.fft_size:
            raise ValueError("require 0 < frame_hop <= frame_length <= fft_size")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ValueError("require 0 <= mel_fmin < mel_fmax <= sample_rate/2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")

    @property
    def fft_bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearSpectrogram:
    magnitudes: np.ndarray  # [frames, fft_bins]
    frame_hop: int
    frame_length: int

    @property
    def frames(self) -> int:
        return self.magnitudes.shape[0]


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [frames, n_mels]

    @property
    def frames(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path: Union[str, os.PathLike]) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(os.fspath(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            n_frames = f.getnframes()
            payload = f.readframes(n_frames)
    except EOFError as e:
        raise TruncatedAudioError(f"{path}: truncated WAV header") from e
    except wave.Error as e:
        if "missing" in str(e):
            raise TruncatedAudioError(f"{path}: {e}") from e
        raise AudioFormatError(f"{path}: {e}") from e
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(payload) < n_frames * width:
        raise TruncatedAudioError(
            f"{path}: header declares {n_frames} samples, file holds "
            f"{len(payload) // width}"
        )
    pcm = np.frombuffer(payload, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def save_wav(path: Union[str, os.PathLike], w: Waveform) -> None:
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(to_pcm16(w.samples).tobytes())


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase (anti-aliased) rate conversion between supported rates."""
    if target_rate == w.sample_rate:
        return w
    g = math.gcd(w.sample_rate, target_rate)
    out = resample_poly(w.samples.astype(np.float64), target_rate // g, w.sample_rate // g)
    return Waveform(np.clip(out, -1.0, 1.0), target_rate)


# ---------------------------------------------------------------------------
# Spectral features
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _hann(frame_length: int) -> torch.Tensor:
    return torch.hann_window(frame_length, dtype=torch.float64)


def num_frames(n_samples: int, cfg: FeatureConfig) -> int:
    return -(-n_samples // cfg.frame_hop)


def spectrogram(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """STFT magnitudes of ``x`` ([..., samples]) as ``[..., fft_bins, frames]``.

    The signal is reflect-padded by (fft_size - hop)/2 on the left and the
    remainder plus whatever rounds the length up to a multiple of the hop on
    the right, so a signal of ``n`` samples yields ``ceil(n / hop)`` frames.
    """
    n = x.shape[-1]
    if n < cfg.frame_length:
        raise WaveformTooShortError(
            f"waveform of {n} samples is shorter than one frame ({cfg.frame_length})"
        )
    frames = num_frames(n, cfg)
    pad_left = (cfg.fft_size - cfg.frame_hop) // 2
    pad_right = cfg.fft_size - cfg.frame_hop - pad_left + frames * cfg.frame_hop - n
    if max(pad_left, pad_right) >= n:
        raise WaveformTooShortError(f"waveform of {n} samples too short to pad")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, n)
    flat = F.pad(flat, (pad_left, pad_right), mode="reflect").squeeze(1)
    window = _hann(cfg.frame_length).to(dtype=x.dtype, device=x.device)
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.frame_hop,
        win_length=cfg.frame_length,
        window=window,
        center=False,
        return_complex=True,
    )
    mag = spec.abs()
    assert mag.shape[-1] == frames
    return mag.reshape(*lead, cfg.fft_bins, frames)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _mel_filterbank_cached(sample_rate, fft_size, n_mels, fmin, fmax) -> np.ndarray:
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # area normalisation: each triangle integrates to the same value
    fb *= (2.0 / (upper - lower))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError(
            "mel filterbank has empty filters; use fewer mels or a larger fft_size"
        )
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular, area-normalised mel filterbank of shape [n_mels, fft_bins]."""
    return _mel_filterbank_cached(
        cfg.sample_rate, cfg.fft_size, cfg.n_mels, float(cfg.mel_fmin), float(cfg.mel_fmax)
    )


def linear_to_mel(mag: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Log-mel from ``[..., fft_bins, frames]`` magnitudes."""
    fb = mel_filterbank(cfg)
    if mag.shape[-2] != fb.shape[1]:
        raise FeatureConfigMismatch(
            f"spectrogram has {mag.shape[-2]} bins, filterbank expects {fb.shape[1]}"
        )
    fb_t = torch.from_numpy(np.array(fb)).to(dtype=mag.dtype, device=mag.device)
    return torch.log(torch.clamp(torch.matmul(fb_t, mag), min=LOG_FLOOR))


def mel_from_audio(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    return linear_to_mel(spectrogram(x, cfg), cfg)


def linear_spectrogram(w: Waveform, cfg: FeatureConfig) -> LinearSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise FeatureConfigMismatch(
            f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    mag = spectrogram(torch.from_numpy(w.samples.astype(np.float64)), cfg)
    return LinearSpectrogram(
        magnitudes=mag.T.numpy().astype(np.float32),
        frame_hop=cfg.frame_hop,
        frame_length=cfg.frame_length,
    )


def mel_spectrogram(lin: LinearSpectrogram, cfg: FeatureConfig) -> MelSpectrogram:
    if lin.frame_hop != cfg.frame_hop or lin.frame_length != cfg.frame_length:
        raise FeatureConfigMismatch("spectrogram framing differs from config")
    mag = torch.from_numpy(lin.magnitudes.astype(np.float64)).T
    return MelSpectrogram(linear_to_mel(mag, cfg).T.numpy().astype(np.float32))
