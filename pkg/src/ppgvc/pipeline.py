"""Model assembly, segment-sliced VAE-GAN training, checkpoints and conversion."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .audio_features import (
    FeatureConfig,
    Waveform,
    linear_to_mel,
    load_wav,
    mel_from_audio,
    resample,
    spectrogram,
)
from .config import ConfigError, TrainConfig
from .discriminators import Discriminator
from .encoders import (
    ConformerEncoder,
    GaussianSequence,
    PosteriorEncoder,
    PriorEncoder,
    SpeakerTable,
    align_linguistic,
    read_ppg,
    sequence_mask,
)
from .generator import Decoder, reparameterize
from .losses import (
    LossReport,
    adversarial_d_loss,
    adversarial_g_loss,
    feature_matching_loss,
    kl_divergence,
    mel_mse,
    total_generator_loss,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "ppgvc-ckpt-1"


class DataError(ValueError):
    """Malformed manifest or unusable training audio."""


class NumericalDivergence(FloatingPointError):
    def __init__(self, terms: Sequence[str], step: int):
        self.terms = list(terms)
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {', '.join(self.terms)}")


class UnknownSpeaker(KeyError):
    pass


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class UtteranceRecord:
    audio_path: str
    speaker_id: str
    ppg_path: Optional[str] = None


def read_manifest(path: Union[str, os.PathLike]) -> List[UtteranceRecord]:
    """Parse ``audio_path|speaker_id[|ppg_path]`` lines; relative paths are
    resolved against the manifest's directory."""
    base = Path(path).parent
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) not in (2, 3) or not all(parts):
                raise DataError(f"{path}:{lineno}: expected audio_path|speaker_id[|ppg_path]")
            audio = str(base / parts[0])
            ppg = str(base / parts[2]) if len(parts) == 3 else None
            for p in (audio, ppg):
                if p is not None and not os.path.isfile(p):
                    raise DataError(f"{path}:{lineno}: missing file {p}")
            records.append(UtteranceRecord(audio, parts[1], ppg))
    if not records:
        raise DataError(f"{path}: manifest is empty")
    return records


def write_manifest(path, records: Sequence[UtteranceRecord]) -> None:
    base = Path(path).parent
    with open(path, "w") as f:
        for r in records:
            fields = [os.path.relpath(r.audio_path, base), r.speaker_id]
            if r.ppg_path:
                fields.append(os.path.relpath(r.ppg_path, base))
            f.write("|".join(fields) + "\n")


def prepare_audio(w: Waveform, cfg: FeatureConfig) -> torch.Tensor:
    """Resample to the model rate and trim to a whole number of hops."""
    w = resample(w, cfg.sample_rate)
    n = (len(w) // cfg.frame_hop) * cfg.frame_hop
    if n < max(cfg.frame_length, cfg.fft_size):
        raise DataError(f"utterance of {len(w)} samples is too short")
    return torch.from_numpy(w.samples[:n].copy())


class UtteranceDataset(Dataset):
    def __init__(self, records: Sequence[UtteranceRecord], speaker_map: Dict[str, int], cfg: TrainConfig):
        self.records = list(records)
        self.speaker_map = speaker_map
        self.cfg = cfg

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        r = self.records[idx]
        wav = prepare_audio(load_wav(r.audio_path), self.cfg.features)
        item = utterance_item(wav, self.speaker_map[r.speaker_id], self.cfg)
        if r.ppg_path:
            item["ppg"] = torch.from_numpy(read_ppg(r.ppg_path)).T
        return item


def utterance_item(wav: torch.Tensor, speaker: int, cfg: TrainConfig) -> dict:
    spec = spectrogram(wav, cfg.features)
    if spec.shape[-1] < cfg.segment_frames:
        raise DataError(
            f"utterance has {spec.shape[-1]} frames, fewer than segment_frames={cfg.segment_frames}"
        )
    return {
        "wav": wav,
        "spec": spec,
        "mel": linear_to_mel(spec, cfg.features),
        "speaker": speaker,
    }


def collate(items: List[dict]) -> dict:
    lengths = torch.tensor([it["spec"].shape[-1] for it in items])
    t_max = int(lengths.max())
    hop = items[0]["wav"].shape[-1] // items[0]["spec"].shape[-1]
    batch = {
        "lengths": lengths,
        "speaker": torch.tensor([it["speaker"] for it in items]),
        "wav": torch.zeros(len(items), t_max * hop),
        "spec": torch.zeros(len(items), items[0]["spec"].shape[0], t_max),
        "mel": torch.zeros(len(items), items[0]["mel"].shape[0], t_max),
    }
    for i, it in enumerate(items):
        t = it["spec"].shape[-1]
        batch["wav"][i, : t * hop] = it["wav"]
        batch["spec"][i, :, :t] = it["spec"]
        batch["mel"][i, :, :t] = it["mel"]
    if all("ppg" in it for it in items):
        t_g = max(it["ppg"].shape[-1] for it in items)
        batch["ppg"] = torch.zeros(len(items), items[0]["ppg"].shape[0], t_g)
        for i, it in enumerate(items):
            batch["ppg"][i, :, : it["ppg"].shape[-1]] = it["ppg"]
    return batch


# ---------------------------------------------------------------------------
# Segment slicing
# ---------------------------------------------------------------------------


def slice_segments(
    z: torch.Tensor,
    w: torch.Tensor,
    segment_frames: int,
    hop: int,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Random ``segment_frames`` window of a latent ``[d_z, T]`` and the matching waveform span."""
    frames = z.shape[-1]
    if frames < segment_frames:
        raise DataError(f"{frames} frames is shorter than one segment ({segment_frames})")
    if w.shape[-1] != frames * hop:
        raise ValueError(f"waveform length {w.shape[-1]} != frames*hop = {frames * hop}")
    start = int(rng.integers(0, frames - segment_frames + 1))
    z_seg = z[..., start : start + segment_frames]
    w_seg = w[..., start * hop : (start + segment_frames) * hop]
    return z_seg, w_seg, start


def batch_segments(z, wav, lengths, segment_frames, hop, rng):
    z_segs, w_segs, starts = [], [], []
    for i in range(z.shape[0]):
        t = int(lengths[i])
        zs, ws, start = slice_segments(z[i, :, :t], wav[i, : t * hop], segment_frames, hop, rng)
        z_segs.append(zs)
        w_segs.append(ws)
        starts.append(start)
    return torch.stack(z_segs), torch.stack(w_segs), starts


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class VoiceConversionModel(nn.Module):
    """Linguistic, prior and posterior encoders, speaker table and decoder."""

    def __init__(self, cfg: TrainConfig, n_speakers: int):
        super().__init__()
        m, f = cfg.model, cfg.features
        self.cfg = cfg
        self.speakers = SpeakerTable(n_speakers, m.speaker_channels)
        self.linguistic = None
        if m.linguistic_source == "conformer":
            self.linguistic = ConformerEncoder(
                f.n_mels, m.linguistic_channels, m.conformer_blocks, m.conformer_heads,
                m.conformer_kernel, m.dropout,
            )
            if m.freeze_linguistic:
                self.linguistic.requires_grad_(False)
        self.prior = PriorEncoder(
            m.linguistic_channels, m.speaker_channels, m.latent_channels, m.prior_hidden,
            m.prior_filter, m.prior_blocks, m.prior_heads, m.prior_kernel, m.dropout,
        )
        self.posterior = PosteriorEncoder(
            f.fft_bins, m.speaker_channels, m.latent_channels, m.posterior_hidden,
            m.posterior_kernel, m.posterior_dilation_rate, m.posterior_layers,
        )
        self.decoder = Decoder(
            m.latent_channels, m.speaker_channels, m.decoder_channels, m.upsample_factors,
            m.mrf_kernel_sizes, m.mrf_dilations,
        )

    def linguistic_features(self, mel, mask, ppg=None) -> torch.Tensor:
        frames = mel.shape[-1]
        if self.linguistic is None:
            if ppg is None:
                raise DataError("model uses precomputed linguistic features but none were given")
            return align_linguistic(ppg, frames, self.cfg.model.linguistic_subsample) * mask
        if self.cfg.model.freeze_linguistic:
            with torch.no_grad():
                return self.linguistic(mel, mask)
        return self.linguistic(mel, mask)

    def prior_from_mel(self, mel, s, mask, ppg=None) -> GaussianSequence:
        return self.prior(self.linguistic_features(mel, mask, ppg), s, mask)


def build_discriminator(cfg: TrainConfig) -> Discriminator:
    m = cfg.model
    return Discriminator(m.periods, m.n_scales, m.mpd_channels, m.msd_channels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Trainer:
    """Owns model, discriminator, optimizers and RNG streams."""

    def __init__(self, cfg: TrainConfig, speaker_map: Dict[str, int]):
        self.cfg = cfg
        self.speaker_map = dict(speaker_map)
        n_speakers = cfg.model.n_speakers or len(self.speaker_map)
        if len(self.speaker_map) > n_speakers:
            raise ConfigError(f"{len(self.speaker_map)} speakers but model.n_speakers={n_speakers}")
        torch.manual_seed(cfg.seed)
        self.model = VoiceConversionModel(cfg, n_speakers)
        self.discriminator = build_discriminator(cfg)
        self.opt_g = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad], cfg.lr_g, betas=cfg.betas, eps=1e-9
        )
        self.opt_d = torch.optim.AdamW(self.discriminator.parameters(), cfg.lr_d, betas=cfg.betas, eps=1e-9)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, cfg.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, cfg.lr_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0

    def train_step(self, batch: dict) -> LossReport:
        """One discriminator update followed by one generator update."""
        cfg, model = self.cfg, self.model
        hop = cfg.features.frame_hop
        model.train()
        self.discriminator.train()
        lengths = batch["lengths"]
        mask = sequence_mask(lengths, batch["spec"].shape[-1])[:, None].to(batch["spec"].dtype)
        s = model.speakers(batch["speaker"])
        q = model.prior_from_mel(batch["mel"], s, mask, batch.get("ppg"))
        p = model.posterior(batch["spec"], s, mask)
        z = reparameterize(p, 1.0, self.noise)
        z_seg, w_seg, _ = batch_segments(z, batch["wav"], lengths, cfg.segment_frames, hop, self.rng)
        w_g = model.decoder(z_seg, s)

        d_real = self.discriminator(w_seg)
        d_fake = self.discriminator(w_g.detach())
        loss_d = adversarial_d_loss(d_real, d_fake)
        if not torch.isfinite(loss_d):
            raise NumericalDivergence(["adv_d"], self.step)
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        d_real = self.discriminator(w_seg)
        d_fake = self.discriminator(w_g)
        adv_g = adversarial_g_loss(d_fake)
        fm = feature_matching_loss(d_real, d_fake)
        recon = mel_mse(mel_from_audio(w_g, cfg.features), mel_from_audio(w_seg, cfg.features))
        kl = kl_divergence(p, q, mask)
        total = total_generator_loss(recon, kl, adv_g, fm, cfg.weights)
        report = LossReport(
            kl=kl.item(), adv_d=loss_d.item(), adv_g=adv_g.item(), fm=fm.item(),
            recon=recon.item(), total=total.item(),
        )
        bad = report.nonfinite_terms()
        if bad:
            raise NumericalDivergence(bad, self.step)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        self.step += 1
        return report

    def end_epoch(self):
        self.epoch += 1
        self.sched_g.step()
        self.sched_d.step()

    def fit(self, loader: DataLoader, steps: int, log_path=None, checkpoint_dir=None) -> List[LossReport]:
        reports = []
        start = time.time()
        log = open(log_path, "a") if log_path else None
        try:
            while self.step < steps:
                for batch in loader:
                    report = self.train_step(batch)
                    reports.append(report)
                    if log and self.step % self.cfg.log_interval == 0:
                        log.write(report.to_json(step=self.step, wall_time=round(time.time() - start, 3)) + "\n")
                        log.flush()
                    if checkpoint_dir and self.step % self.cfg.checkpoint_interval == 0:
                        self.save(Path(checkpoint_dir) / f"ckpt_{self.step:08d}.pt")
                    if self.step >= steps:
                        break
                else:
                    self.end_epoch()
        finally:
            if log:
                log.close()
        return reports

    def converter(self) -> "VoiceConverter":
        return VoiceConverter(self.model, self.cfg, self.speaker_map)

    def save(self, path) -> None:
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "step": self.step,
                "epoch": self.epoch,
                "config": self.cfg.to_dict(),
                "speaker_map": self.speaker_map,
                "model": self.model.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "sched_g": self.sched_g.state_dict(),
                "sched_d": self.sched_d.state_dict(),
                "rng": self.rng.bit_generator.state,
                "noise": self.noise.get_state(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Trainer":
        ckpt = _read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["config"]), ckpt["speaker_map"])
        trainer.model.load_state_dict(ckpt["model"])
        trainer.discriminator.load_state_dict(ckpt["discriminator"])
        trainer.opt_g.load_state_dict(ckpt["opt_g"])
        trainer.opt_d.load_state_dict(ckpt["opt_d"])
        trainer.sched_g.load_state_dict(ckpt["sched_g"])
        trainer.sched_d.load_state_dict(ckpt["sched_d"])
        trainer.rng.bit_generator.state = ckpt["rng"]
        trainer.noise.set_state(ckpt["noise"])
        trainer.step, trainer.epoch = ckpt["step"], ckpt["epoch"]
        return trainer


def _read_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')!r}")
    return ckpt


def make_loader(records, speaker_map, cfg: TrainConfig) -> DataLoader:
    return DataLoader(
        UtteranceDataset(records, speaker_map, cfg),
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=cfg.num_workers,
        collate_fn=collate,
        generator=torch.Generator().manual_seed(cfg.seed),
        drop_last=False,
    )


def speaker_map_for(records: Sequence[UtteranceRecord]) -> Dict[str, int]:
    return {spk: i for i, spk in enumerate(sorted({r.speaker_id for r in records}))}


def train(cfg: TrainConfig, manifest, outdir) -> Trainer:
    """Run a full training job, writing ``train_log.jsonl`` and checkpoints to ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest)
    speaker_map = speaker_map_for(records)
    trainer = Trainer(cfg, speaker_map)
    loader = make_loader(records, speaker_map, cfg)
    trainer.fit(loader, cfg.total_steps, outdir / "train_log.jsonl", outdir)
    trainer.save(outdir / "ckpt_final.pt")
    return trainer


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------


class VoiceConverter:
    """Inference path: mel -> linguistic -> prior(target) -> sample -> decode(target).

    The posterior encoder is never evaluated here.
    """

    def __init__(self, model: VoiceConversionModel, cfg: TrainConfig, speaker_map: Dict[str, int]):
        self.model = model
        self.cfg = cfg
        self.speaker_map = dict(speaker_map)

    @classmethod
    def from_checkpoint(cls, path) -> "VoiceConverter":
        ckpt = _read_checkpoint(path)
        cfg = TrainConfig.from_dict(ckpt["config"])
        speaker_map = ckpt["speaker_map"]
        model = VoiceConversionModel(cfg, cfg.model.n_speakers or len(speaker_map))
        model.load_state_dict(ckpt["model"])
        return cls(model, cfg, speaker_map)

    def speaker_index(self, speaker: Union[str, int]) -> int:
        if isinstance(speaker, str) and speaker in self.speaker_map:
            return self.speaker_map[speaker]
        if isinstance(speaker, int) and 0 <= speaker < self.model.speakers.n_speakers:
            return speaker
        raise UnknownSpeaker(f"unknown target speaker {speaker!r}")

    @torch.no_grad()
    def convert(
        self,
        source: Waveform,
        target_speaker: Union[str, int],
        noise_scale: float = 0.667,
        seed: Optional[int] = 0,
        ppg: Optional[np.ndarray] = None,
    ) -> Waveform:
        f = self.cfg.features
        sid = torch.tensor([self.speaker_index(target_speaker)])
        self.model.eval()
        wav = torch.from_numpy(resample(source, f.sample_rate).samples.astype(np.float32))
        mel = mel_from_audio(wav, f)[None]
        mask = torch.ones(1, 1, mel.shape[-1])
        ppg_t = None if ppg is None else torch.from_numpy(np.asarray(ppg, dtype=np.float32)).T[None]
        s = self.model.speakers(sid)
        q = self.model.prior_from_mel(mel, s, mask, ppg_t)
        z = reparameterize(q, noise_scale, seed)
        out = self.model.decoder(z, s)[0]
        return Waveform(out.numpy(), f.sample_rate)
