"""Training objectives of the VAE-GAN: KL, least-squares adversarial, feature
matching, mel reconstruction and their sum."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch.nn import functional as F

from .audio_features import FeatureConfig, Waveform, mel_from_audio
from .discriminators import DiscriminatorOutput
from .encoders import GaussianSequence


class LossShapeMismatch(ValueError):
    pass


@dataclass
class LossWeights:
    recon: float = 1.0
    kl: float = 1.0
    adv: float = 1.0
    fm: float = 1.0


# Weighting commonly used to make VITS-style systems train well; the
# unweighted sum is the default.
PRACTICAL_WEIGHTS = LossWeights(recon=45.0, kl=1.0, adv=1.0, fm=2.0)


@dataclass
class LossReport:
    kl: float
    adv_d: float
    adv_g: float
    fm: float
    recon: float
    total: float

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra})

    def nonfinite_terms(self):
        return [k for k, v in asdict(self).items() if not np.isfinite(v)]


def kl_divergence(p: GaussianSequence, q: GaussianSequence, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over frames and dimensions of KL(p || q) between diagonal Gaussians.

    Per element: log(sigma_q / sigma_p) + (sigma_p^2 + (mu_p - mu_q)^2) / (2 sigma_q^2) - 1/2.
    """
    if p.mean.shape != q.mean.shape:
        raise LossShapeMismatch(f"p {tuple(p.mean.shape)} vs q {tuple(q.mean.shape)}")
    kl = (
        0.5 * (q.logvar - p.logvar)
        + (torch.exp(p.logvar) + (p.mean - q.mean) ** 2) / (2.0 * torch.exp(q.logvar))
        - 0.5
    )
    if mask is None:
        return kl.mean()
    mask = mask.expand_as(kl)
    return (kl * mask).sum() / mask.sum()


def _check_same_t(a: DiscriminatorOutput, b: DiscriminatorOutput):
    if len(a.scores) != len(b.scores):
        raise LossShapeMismatch(f"{len(a.scores)} vs {len(b.scores)} sub-discriminators")


def adversarial_d_loss(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput) -> torch.Tensor:
    _check_same_t(real_out, fake_out)
    loss = 0.0
    for dr, dg in zip(real_out.scores, fake_out.scores):
        loss = loss + torch.mean((dr - 1.0) ** 2) + torch.mean(dg**2)
    return loss


def adversarial_g_loss(fake_out: DiscriminatorOutput) -> torch.Tensor:
    loss = 0.0
    for dg in fake_out.scores:
        loss = loss + torch.mean((dg - 1.0) ** 2)
    return loss


def feature_matching_loss(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput) -> torch.Tensor:
    """Sum over sub-discriminators and layers of the per-element mean L1 distance.

    The real-side activations are detached.
    """
    _check_same_t(real_out, fake_out)
    loss = 0.0
    for t, (fr, fg) in enumerate(zip(real_out.feature_maps, fake_out.feature_maps)):
        if len(fr) != len(fg):
            raise LossShapeMismatch(f"sub-discriminator {t}: {len(fr)} vs {len(fg)} layers")
        for l, (r, g) in enumerate(zip(fr, fg)):
            if r.shape != g.shape:
                raise LossShapeMismatch(
                    f"sub-discriminator {t} layer {l}: {tuple(r.shape)} vs {tuple(g.shape)}"
                )
            loss = loss + torch.mean(torch.abs(r.detach() - g))
    return loss


def _as_tensor(w: Union[Waveform, torch.Tensor]) -> torch.Tensor:
    if isinstance(w, Waveform):
        return torch.from_numpy(w.samples.astype(np.float64))
    return w


def reconstruction_loss(
    w_g: Union[Waveform, torch.Tensor],
    w_ref: Union[Waveform, torch.Tensor],
    cfg: FeatureConfig,
) -> torch.Tensor:
    """Mean squared difference of the log-mel spectrograms of two equal-length signals."""
    w_g, w_ref = _as_tensor(w_g), _as_tensor(w_ref)
    if w_g.shape != w_ref.shape:
        raise LossShapeMismatch(f"waveform shapes {tuple(w_g.shape)} vs {tuple(w_ref.shape)}")
    return mel_mse(mel_from_audio(w_g, cfg), mel_from_audio(w_ref, cfg).detach())


def mel_mse(mel_g: torch.Tensor, mel_ref: torch.Tensor) -> torch.Tensor:
    if mel_g.shape != mel_ref.shape:
        raise LossShapeMismatch(f"mel shapes {tuple(mel_g.shape)} vs {tuple(mel_ref.shape)}")
    return F.mse_loss(mel_g, mel_ref)


def total_generator_loss(recon, kl, adv_g, fm, weights: Optional[LossWeights] = None):
    """Weighted sum of the generator terms; with default weights a plain sum."""
    w = weights or LossWeights()
    return w.recon * recon + w.kl * kl + w.adv * adv_g + w.fm * fm
