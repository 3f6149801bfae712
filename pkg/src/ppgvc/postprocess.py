"""Silence-based post-processing attacks.

* energy VAD (``detect_silence``),
* silence replacement with crops of real recorded silence,
* a global noise track built from real silence clips with parabolic
  cross-fades, added at a target SNR.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .audio_features import Waveform, load_wav

EPS = 1e-12
DIGITAL_SILENCE_RMS = 1e-7  # about -140 dBFS


class EmptyBankError(ValueError):
    pass


class ShortClipWarning(UserWarning):
    """A bank clip was shorter than the crop and had to be tiled."""


class SilentInputError(ValueError):
    pass


@dataclass(frozen=True)
class SilenceSegment:
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start


@dataclass
class SilenceBank:
    clips: List[Waveform]
    min_clip_ms: float = 100.0

    def __post_init__(self):
        rates = {c.sample_rate for c in self.clips}
        if len(rates) > 1:
            raise ValueError(f"bank clips have mixed sample rates {sorted(rates)}")
        for c in self.clips:
            if len(c) < self.min_clip_ms * c.sample_rate / 1000:
                raise ValueError(f"bank clip of {len(c)} samples is shorter than {self.min_clip_ms} ms")

    @property
    def sample_rate(self) -> Optional[int]:
        return self.clips[0].sample_rate if self.clips else None

    def __len__(self):
        return len(self.clips)

    def require(self, sample_rate: Optional[int] = None):
        if not self.clips:
            raise EmptyBankError("silence bank is empty")
        if sample_rate is not None and sample_rate != self.sample_rate:
            raise ValueError(f"bank is {self.sample_rate} Hz, audio is {sample_rate} Hz")


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64)))))


def dbfs(x: np.ndarray) -> float:
    return 20.0 * np.log10(max(rms(x), EPS))


# ---------------------------------------------------------------------------
# VAD
# ---------------------------------------------------------------------------


def frame_rms_db(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """RMS level in dBFS of frames starting every ``hop`` samples; the last
    frame is shortened so the whole signal is covered."""
    n = samples.size
    n_frames = 1 if n <= frame else -(-(n - frame) // hop) + 1
    x = np.asarray(samples, dtype=np.float64)
    out = np.empty(n_frames)
    for i in range(n_frames):
        out[i] = dbfs(x[i * hop : min(i * hop + frame, n)])
    return out


def detect_silence(
    w: Waveform,
    frame_ms: float = 20.0,
    energy_threshold_db: float = -45.0,
    min_silence_ms: float = 120.0,
    hop_ms: Optional[float] = None,
) -> List[SilenceSegment]:
    """Maximal runs of frames quieter than ``energy_threshold_db``.

    A run of frames ``i..j`` becomes the sample span covered by those frames,
    so every sample in a segment lies in at least one quiet frame. Runs
    shorter than ``min_silence_ms`` are dropped. Hop defaults to half a frame.
    """
    sr = w.sample_rate
    frame = max(1, int(round(frame_ms * sr / 1000)))
    hop = max(1, int(round((hop_ms if hop_ms is not None else frame_ms / 2) * sr / 1000)))
    min_len = min_silence_ms * sr / 1000
    n = len(w)
    quiet = frame_rms_db(w.samples, frame, hop) < energy_threshold_db
    segments = []
    i = 0
    while i < quiet.size:
        if not quiet[i]:
            i += 1
            continue
        j = i
        while j + 1 < quiet.size and quiet[j + 1]:
            j += 1
        start, end = i * hop, min(j * hop + frame, n)
        if end - start >= min_len:
            segments.append(SilenceSegment(start, end))
        i = j + 1
    return segments


# ---------------------------------------------------------------------------
# Silence replacement
# ---------------------------------------------------------------------------


@dataclass
class SpliceRecord:
    segment: SilenceSegment
    clip_index: int
    offset: int
    tiled: bool


def crop_clip(clip: np.ndarray, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, int, bool]:
    if clip.size >= length:
        offset = int(rng.integers(0, clip.size - length + 1))
        return clip[offset : offset + length], offset, False
    warnings.warn(
        f"bank clip of {clip.size} samples shorter than {length}-sample crop; tiling",
        ShortClipWarning,
        stacklevel=3,
    )
    reps = -(-length // clip.size)
    return np.tile(clip, reps)[:length], 0, True


def replace_silence(
    w: Waveform,
    segments: Sequence[SilenceSegment],
    bank: SilenceBank,
    crossfade_ms: float = 5.0,
    rng: Optional[np.random.Generator] = None,
    log: Optional[list] = None,
) -> Waveform:
    """Overwrite each segment with a random crop of a random bank clip.

    Linear ramps of ``crossfade_ms`` run inside each segment's two edges;
    every sample outside the segments is returned unchanged. If ``log`` is
    a list, one ``SpliceRecord`` per segment is appended to it.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out = w.samples.copy()
    if not segments:
        return Waveform(out, w.sample_rate)
    bank.require(w.sample_rate)
    ramp_len = int(round(crossfade_ms * w.sample_rate / 1000))
    for seg in segments:
        if seg.end > len(w):
            raise ValueError(f"segment {seg} exceeds waveform of {len(w)} samples")
        idx = int(rng.integers(len(bank)))
        crop, offset, tiled = crop_clip(bank.clips[idx].samples, len(seg), rng)
        r = min(ramp_len, len(seg) // 2)
        gain = np.ones(len(seg), dtype=np.float64)
        if r > 0:
            ramp = np.arange(1, r + 1, dtype=np.float64) / (r + 1)
            gain[:r] = ramp
            gain[-r:] = ramp[::-1]
        orig = out[seg.start : seg.end].astype(np.float64)
        mixed = gain * crop + (1.0 - gain) * orig
        out[seg.start : seg.end] = np.where(gain == 1.0, crop, mixed)
        if log is not None:
            log.append(SpliceRecord(seg, idx, offset, tiled))
    return Waveform(np.clip(out, -1.0, 1.0), w.sample_rate)


# ---------------------------------------------------------------------------
# Global noise
# ---------------------------------------------------------------------------


def fade_out_gain(u: np.ndarray) -> np.ndarray:
    return 1.0 - np.square(u)


def fade_in_gain(u: np.ndarray) -> np.ndarray:
    return 1.0 - np.square(1.0 - u)


def parabolic_crossfade(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Blend equal-length ``a`` (fading out) and ``b`` (fading in)."""
    n = a.size
    u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return a * fade_out_gain(u) + b * fade_in_gain(u)


def build_noise_track(
    bank: SilenceBank,
    target_len: int,
    rng: Optional[np.random.Generator] = None,
    overlap_ms: float = 50.0,
) -> Waveform:
    """Chain randomly drawn, RMS-equalised bank clips into a ``target_len`` track."""
    bank.require()
    if target_len < 1:
        raise ValueError("target_len must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    levels = np.array([rms(c.samples) for c in bank.clips])
    target = float(np.mean(levels))
    clips = [
        c.samples.astype(np.float64) * (target / lvl if lvl > 0 else 0.0)
        for c, lvl in zip(bank.clips, levels)
    ]
    overlap = int(round(overlap_ms * bank.sample_rate / 1000))
    track = clips[int(rng.integers(len(clips)))]
    while track.size < target_len:
        nxt = clips[int(rng.integers(len(clips)))]
        ov = min(overlap, track.size, nxt.size - 1)
        if ov > 0:
            joined = parabolic_crossfade(track[-ov:], nxt[:ov])
            track = np.concatenate([track[:-ov], joined, nxt[ov:]])
        else:
            track = np.concatenate([track, nxt])
    return Waveform(np.clip(track[:target_len], -1.0, 1.0), bank.sample_rate)


@dataclass
class NoiseReport:
    snr_db: float
    achieved_snr_db: float
    scale: float
    clip_fraction: float


def add_global_noise(w: Waveform, noise: Waveform, snr_db: float) -> Tuple[Waveform, NoiseReport]:
    """Superimpose ``noise`` scaled so that 20*log10(rms(w) / rms(scaled noise)) = ``snr_db``.

    The sum is clipped to [-1, 1]; the report gives the SNR achieved before
    clipping and the fraction of samples that clipped.
    """
    if len(noise) < len(w):
        raise ValueError(f"noise has {len(noise)} samples, need {len(w)}")
    signal = w.samples.astype(np.float64)
    n = noise.samples[: len(w)].astype(np.float64)
    s_rms, n_rms = rms(signal), rms(n)
    if s_rms == 0:
        raise SilentInputError("input is silent; SNR is undefined")
    if n_rms == 0:
        raise SilentInputError("noise track has zero RMS")
    scale = s_rms / (n_rms * 10 ** (snr_db / 20.0))
    mixed = signal + scale * n
    achieved = 20 * np.log10(s_rms / rms(scale * n))
    clipped = float(np.mean(np.abs(mixed) > 1.0))
    return Waveform(np.clip(mixed, -1.0, 1.0), w.sample_rate), NoiseReport(snr_db, achieved, scale, clipped)


# ---------------------------------------------------------------------------
# Bank harvesting
# ---------------------------------------------------------------------------


def harvest_silence(
    recordings: Iterable[Waveform],
    min_clip_ms: float = 100.0,
    **vad_kwargs,
) -> SilenceBank:
    """Collect the silent stretches of genuine recordings into a bank."""
    clips = []
    for w in recordings:
        for seg in detect_silence(w, **vad_kwargs):
            if len(seg) >= min_clip_ms * w.sample_rate / 1000:
                clips.append(Waveform(w.samples[seg.start : seg.end], w.sample_rate))
    return SilenceBank(clips, min_clip_ms)


def load_bank(directory, min_clip_ms: float = 100.0) -> SilenceBank:
    paths = sorted(Path(directory).glob("*.wav"))
    return SilenceBank([load_wav(p) for p in paths], min_clip_ms)
