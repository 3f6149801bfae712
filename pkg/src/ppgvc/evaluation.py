"""EER over trial lists and a silence-statistics spoofing detector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .audio_features import Waveform
from .postprocess import DIGITAL_SILENCE_RMS, frame_rms_db

BONAFIDE = "bonafide"
SPOOF = "spoof"

# Score for files in which no frame falls below the silence threshold.
NO_SILENCE_SCORE = 0.0
SILENCE_THRESHOLD_DB = -45.0
SILENCE_FRACTION_WEIGHT = 0.25


class TrialError(ValueError):
    pass


@dataclass(frozen=True)
class TrialEntry:
    path: str
    label: str

    def __post_init__(self):
        if self.label not in (BONAFIDE, SPOOF):
            raise TrialError(f"label must be {BONAFIDE!r} or {SPOOF!r}, got {self.label!r}")


@dataclass(frozen=True)
class ScoreRecord:
    path: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise TrialError(f"{self.path}: non-finite score")


def read_trials(path) -> List[TrialEntry]:
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise TrialError(f"{path}:{lineno}: expected 'path<TAB>label'")
            trials.append(TrialEntry(parts[0], parts[1].strip()))
    return trials


def write_trials(path, trials: Iterable[TrialEntry]) -> None:
    with open(path, "w") as f:
        for t in trials:
            f.write(f"{t.path}\t{t.label}\n")


def read_scores(path) -> List[ScoreRecord]:
    scores = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise TrialError(f"{path}:{lineno}: expected 'path<TAB>score'")
            try:
                scores.append(ScoreRecord(parts[0], float(parts[1])))
            except ValueError as e:
                raise TrialError(f"{path}:{lineno}: {e}") from e
    return scores


def write_scores(path, scores: Iterable[ScoreRecord]) -> None:
    with open(path, "w") as f:
        for s in scores:
            f.write(f"{s.path}\t{s.score!r}\n")


def split_scores(scores: Sequence[ScoreRecord], trials: Sequence[TrialEntry]) -> Tuple[np.ndarray, np.ndarray]:
    """Match scores to trials; returns (bonafide scores, spoof scores)."""
    by_path: Dict[str, float] = {}
    for s in scores:
        if s.path in by_path:
            raise TrialError(f"duplicate score for {s.path}")
        by_path[s.path] = s.score
    bona, spoof = [], []
    seen = set()
    for t in trials:
        if t.path in seen:
            raise TrialError(f"duplicate trial {t.path}")
        seen.add(t.path)
        if t.path not in by_path:
            raise TrialError(f"no score for trial {t.path}")
        (bona if t.label == BONAFIDE else spoof).append(by_path[t.path])
    return np.asarray(bona, dtype=np.float64), np.asarray(spoof, dtype=np.float64)


def eer_from_arrays(bonafide: np.ndarray, spoof: np.ndarray) -> Tuple[float, float]:
    """EER and threshold; a trial is accepted as bona fide when score >= threshold.

    Operating points are taken at every distinct score plus a reject-all
    point; the EER is the linear interpolation where FAR - FRR changes sign.
    """
    bonafide = np.asarray(bonafide, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    if bonafide.size == 0 or spoof.size == 0:
        raise TrialError("EER needs both bona fide and spoof trials")
    thresholds = np.unique(np.concatenate([bonafide, spoof]))
    frr = np.searchsorted(np.sort(bonafide), thresholds, side="left") / bonafide.size
    far = 1.0 - np.searchsorted(np.sort(spoof), thresholds, side="left") / spoof.size
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0 or i == 0:
        return float(frr[i]), float(thresholds[i])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = frr[i - 1] + lam * (frr[i] - frr[i - 1])
    thr = thresholds[i - 1] + lam * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(thr)


def compute_eer(scores: Sequence[ScoreRecord], trials: Sequence[TrialEntry]) -> Tuple[float, float]:
    return eer_from_arrays(*split_scores(scores, trials))


# ---------------------------------------------------------------------------
# Silence-statistics detector
# ---------------------------------------------------------------------------


def spectral_flatness(frame: np.ndarray) -> float:
    """Geometric over arithmetic mean of the Hann-windowed power spectrum.

    Digitally silent frames have no noise floor at all and score 0.
    """
    x = np.asarray(frame, dtype=np.float64)
    if np.sqrt(np.mean(x**2)) < DIGITAL_SILENCE_RMS:
        return 0.0
    power = np.abs(np.fft.rfft(x * np.hanning(x.size))) ** 2
    mean = np.mean(power)
    floor = 1e-12 * mean
    return float(np.exp(np.mean(np.log(power + floor))) / (mean + floor))


def silence_baseline_score(
    w: Waveform,
    frame_ms: float = 20.0,
    hop_ms: float = 10.0,
    threshold_db: float = SILENCE_THRESHOLD_DB,
) -> float:
    """Higher means more bona-fide-like silence.

    score = mean spectral flatness of frames below ``threshold_db``
    + 0.25 * fraction of such frames. Files with no quiet frame get
    ``NO_SILENCE_SCORE``.
    """
    sr = w.sample_rate
    frame = int(round(frame_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    levels = frame_rms_db(w.samples, frame, hop)
    quiet = np.flatnonzero(levels < threshold_db)
    if quiet.size == 0:
        return NO_SILENCE_SCORE
    x = w.samples.astype(np.float64)
    flatness = [spectral_flatness(x[i * hop : i * hop + frame]) for i in quiet if i * hop + frame <= x.size]
    mean_flat = float(np.mean(flatness)) if flatness else 0.0
    return mean_flat + SILENCE_FRACTION_WEIGHT * quiet.size / levels.size
