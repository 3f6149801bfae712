"""Toy speech-like corpora for smoke training and attack experiments.

Utterances are formant-filtered pulse trains and noise bursts separated
by pauses. A "speaker" fixes pitch and formant scaling; a content seed
fixes the phone sequence, so the same content can be rendered by several
speakers. Recordings carry a low broadband room-noise floor so their
pauses look like real, not digital, silence.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from .audio_features import Waveform, save_wav

# (F1, F2, F3) in Hz for a handful of vowel-like targets
_VOWELS = np.array(
    [[730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [570, 840, 2410], [300, 870, 2240]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    f0: float
    formant_scale: float


DEFAULT_SPEAKERS = (
    ToySpeaker("spk_low", 110.0, 0.92),
    ToySpeaker("spk_high", 220.0, 1.12),
    ToySpeaker("spk_mid", 160.0, 1.0),
)


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def room_noise(n: int, rng: np.random.Generator, level_db: float = -60.0) -> np.ndarray:
    """Broadband noise with a gentle low-pass tilt at ``level_db`` dBFS RMS."""
    x = lfilter([1.0], [1.0, -0.6], rng.standard_normal(n))
    return x * (10 ** (level_db / 20) / np.sqrt(np.mean(x**2)))


def content_plan(seed: int, duration: float) -> List[Tuple[str, float, int]]:
    """Phone sequence ``(kind, seconds, vowel)`` for a content seed; kind is
    'v' (voiced), 'u' (unvoiced) or 'p' (pause)."""
    rng = np.random.default_rng(seed)
    plan = [("p", float(rng.uniform(0.15, 0.3)), 0)]
    total = plan[0][1]
    while total < duration - 0.35:
        for _ in range(int(rng.integers(2, 5))):
            kind = "u" if rng.random() < 0.25 else "v"
            dur = float(rng.uniform(0.06, 0.1) if kind == "u" else rng.uniform(0.08, 0.16))
            plan.append((kind, dur, int(rng.integers(len(_VOWELS)))))
            total += dur
        pause = float(rng.uniform(0.15, 0.35))
        plan.append(("p", pause, 0))
        total += pause
    plan.append(("p", max(duration - total, 0.0), 0))
    return plan


def synth_utterance(
    content_seed: int,
    speaker: ToySpeaker,
    sample_rate: int = 24000,
    duration: float = 3.0,
    noise_floor_db: Optional[float] = -60.0,
    rng: Optional[np.random.Generator] = None,
) -> Waveform:
    rng = rng or np.random.default_rng(content_seed * 7919 + int(speaker.f0))
    n_total = int(round(duration * sample_rate))
    out = np.zeros(n_total)
    pos = 0
    for kind, dur, vowel in content_plan(content_seed, duration):
        n = min(int(round(dur * sample_rate)), n_total - pos)
        if n <= 0:
            break
        if kind != "p":
            t = np.arange(n) / sample_rate
            if kind == "v":
                f0 = speaker.f0 * (1 + 0.05 * np.sin(2 * np.pi * 3 * t + vowel))
                phase = np.cumsum(f0 / sample_rate)
                src = (np.diff(np.floor(phase), prepend=0.0) > 0).astype(np.float64)
                src += 0.02 * rng.standard_normal(n)
                seg = sum(
                    _resonator(src, f * speaker.formant_scale, 80 + 40 * k, sample_rate)
                    for k, f in enumerate(_VOWELS[vowel])
                )
            else:
                seg = _resonator(rng.standard_normal(n), 4000 * speaker.formant_scale, 2000, sample_rate)
            env = np.sin(np.pi * np.arange(n) / n) ** 0.5
            seg = seg * env
            out[pos : pos + n] = 0.3 * seg / (np.max(np.abs(seg)) + 1e-9)
        pos += n
    if noise_floor_db is not None:
        out += room_noise(n_total, rng, noise_floor_db)
    return Waveform(np.clip(out, -1, 1), sample_rate)


def write_toy_corpus(
    outdir,
    speakers=DEFAULT_SPEAKERS,
    utterances_per_speaker: int = 4,
    sample_rate: int = 24000,
    duration: float = 2.0,
    seed: int = 0,
) -> Path:
    """Write WAVs plus ``manifest.txt`` (``path|speaker``) and return the manifest path."""
    outdir = Path(outdir)
    (outdir / "wavs").mkdir(parents=True, exist_ok=True)
    lines = []
    for spk in speakers:
        for i in range(utterances_per_speaker):
            w = synth_utterance(seed + i, spk, sample_rate, duration)
            rel = Path("wavs") / f"{spk.name}_{i:03d}.wav"
            save_wav(outdir / rel, w)
            lines.append(f"{rel}|{spk.name}")
    manifest = outdir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
