import json

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from ppgvc.audio_features import Waveform, save_wav
from ppgvc.config import ConfigError, TrainConfig, load_config, save_config
from ppgvc.encoders import write_ppg
from ppgvc.losses import adversarial_d_loss
from ppgvc.pipeline import (
    DataError,
    NumericalDivergence,
    Trainer,
    UnknownSpeaker,
    UtteranceRecord,
    VoiceConverter,
    build_discriminator,
    collate,
    make_loader,
    prepare_audio,
    read_manifest,
    slice_segments,
    utterance_item,
    write_manifest,
)
from ppgvc.synthetic import DEFAULT_SPEAKERS, synth_utterance

HOP = 256


def toy_items(cfg, n=2, duration=1.0):
    return [
        utterance_item(prepare_audio(synth_utterance(i, DEFAULT_SPEAKERS[i % 2], 24000, duration), cfg.features),
                       i % 2, cfg)
        for i in range(n)
    ]


# -- segment slicing ----------------------------------------------------------


def test_slice_offsets_are_consistent():
    rng = np.random.default_rng(0)
    z = torch.arange(100.0).view(1, 100).repeat(4, 1)
    w = torch.arange(100 * HOP, dtype=torch.float64)
    for _ in range(50):
        z_seg, w_seg, start = slice_segments(z, w, 32, HOP, rng)
        assert 0 <= start <= 68
        assert z_seg.shape == (4, 32) and w_seg.shape == (32 * HOP,)
        assert z_seg[0, 0] == start and w_seg[0] == start * HOP


def test_slice_exact_length_uses_whole_utterance():
    z, w = torch.randn(3, 32), torch.randn(32 * HOP)
    z_seg, w_seg, start = slice_segments(z, w, 32, HOP, np.random.default_rng(1))
    assert start == 0 and torch.equal(z_seg, z) and torch.equal(w_seg, w)


def test_slice_rejects_short_and_misaligned():
    with pytest.raises(DataError):
        slice_segments(torch.zeros(3, 20), torch.zeros(20 * HOP), 32, HOP, np.random.default_rng(0))
    with pytest.raises(ValueError):
        slice_segments(torch.zeros(3, 40), torch.zeros(40 * HOP - 1), 32, HOP, np.random.default_rng(0))


def test_slice_starts_are_uniform():
    rng = np.random.default_rng(2)
    z, w = torch.zeros(1, 50), torch.zeros(50 * 4)
    starts = [slice_segments(z, w, 32, 4, rng)[2] for _ in range(10_000)]
    counts = np.bincount(starts, minlength=19)
    assert len(counts) == 19
    assert chisquare(counts).pvalue > 0.01


# -- training -----------------------------------------------------------------


def test_train_step_reproducible(tiny_cfg):
    batch = collate(toy_items(tiny_cfg))
    reports = []
    for _ in range(2):
        trainer = Trainer(tiny_cfg, {"a": 0, "b": 1})
        reports.append([trainer.train_step(batch) for _ in range(2)])
    assert reports[0] == reports[1]
    assert all(np.isfinite(v) for r in reports[0] for v in vars(r).values())


def test_segment_mels_have_equal_shape(tiny_cfg):
    from ppgvc.audio_features import mel_from_audio
    from ppgvc.pipeline import batch_segments
    batch = collate(toy_items(tiny_cfg, n=3))
    z = torch.randn(3, 16, batch["spec"].shape[-1])
    _, w_seg, _ = batch_segments(z, batch["wav"], batch["lengths"], 32, HOP, np.random.default_rng(0))
    assert mel_from_audio(w_seg, tiny_cfg.features).shape == (3, tiny_cfg.features.n_mels, 32)


def test_discriminator_alone_converges_to_half_on_identical_inputs(tiny_cfg):
    torch.manual_seed(0)
    disc = build_discriminator(tiny_cfg)
    opt = torch.optim.AdamW(disc.parameters(), 1e-3, betas=(0.8, 0.99))
    w = torch.from_numpy(synth_utterance(0, DEFAULT_SPEAKERS[0], 24000, 0.4).samples[None, :8192].copy())
    t = disc.n_subdiscriminators
    losses = []
    for _ in range(150):
        out = disc(w)
        loss = adversarial_d_loss(out, out)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    # 0.5 per sub-discriminator is the optimum for identical real/fake inputs
    assert all(v >= 0.5 * t - 1e-4 for v in losses)
    assert losses[-1] - 0.5 * t < 0.05 * (losses[0] - 0.5 * t) + 1e-3


def test_divergence_reports_terms(tiny_cfg):
    trainer = Trainer(tiny_cfg, {"a": 0, "b": 1})
    batch = collate(toy_items(tiny_cfg))
    with torch.no_grad():
        trainer.model.prior.proj.bias.fill_(float("nan"))
    with pytest.raises(NumericalDivergence) as err:
        trainer.train_step(batch)
    assert "kl" in err.value.terms and err.value.step == 0


def test_fit_writes_json_log_and_checkpoints(tiny_cfg, tmp_path):
    records = []
    for i in range(2):
        path = tmp_path / f"u{i}.wav"
        save_wav(path, synth_utterance(i, DEFAULT_SPEAKERS[i], 24000, 0.8))
        records.append(UtteranceRecord(str(path), DEFAULT_SPEAKERS[i].name))
    cfg = TrainConfig.tiny(checkpoint_interval=2)
    trainer = Trainer(cfg, {r.speaker_id: i for i, r in enumerate(records)})
    trainer.fit(make_loader(records, trainer.speaker_map, cfg), 3, tmp_path / "log.jsonl", tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [1, 2, 3]
    assert {"kl", "adv_d", "adv_g", "fm", "recon", "total", "wall_time"} <= set(lines[0])
    assert (tmp_path / "ckpt_00000002.pt").exists()
    assert trainer.epoch == 1


# -- conversion ---------------------------------------------------------------


@pytest.fixture(scope="module")
def fresh_converter():
    cfg = TrainConfig.tiny()
    return Trainer(cfg, {"a": 0, "b": 1}).converter()


def test_convert_length_and_determinism(fresh_converter):
    src = synth_utterance(3, DEFAULT_SPEAKERS[0], 24000, 1.0)
    out = fresh_converter.convert(src, "b", noise_scale=0.0)
    assert len(out) == -(-len(src) // HOP) * HOP and out.sample_rate == 24000
    assert np.array_equal(out.samples, fresh_converter.convert(src, "b", noise_scale=0.0).samples)
    assert np.array_equal(fresh_converter.convert(src, 1, seed=5).samples,
                          fresh_converter.convert(src, 1, seed=5).samples)


def test_convert_resamples_source(fresh_converter):
    src = synth_utterance(3, DEFAULT_SPEAKERS[0], 16000, 1.0)
    assert len(fresh_converter.convert(src, "a")) == 24000 // HOP * HOP + HOP * (24000 % HOP > 0)


def test_convert_unknown_speaker(fresh_converter):
    src = synth_utterance(0, DEFAULT_SPEAKERS[0], 24000, 0.5)
    with pytest.raises(UnknownSpeaker):
        fresh_converter.convert(src, "nobody")
    with pytest.raises(UnknownSpeaker):
        fresh_converter.convert(src, 7)


def test_convert_never_runs_posterior(fresh_converter):
    calls = []
    handle = fresh_converter.model.posterior.register_forward_hook(lambda *a: calls.append(1))
    try:
        fresh_converter.convert(synth_utterance(0, DEFAULT_SPEAKERS[0], 24000, 0.5), "a")
    finally:
        handle.remove()
    assert calls == []


def test_trained_targets_sound_different(toy_trainer):
    conv = toy_trainer.converter()
    src = synth_utterance(99, DEFAULT_SPEAKERS[2], 24000, 1.0)
    low = conv.convert(src, "spk_low", noise_scale=0.0).samples
    high = conv.convert(src, "spk_high", noise_scale=0.0).samples
    # well above float32 rounding relative to the signal level
    assert np.sqrt(np.mean((low - high) ** 2)) > 1e-3 * np.sqrt(np.mean(low**2))


def test_checkpoint_round_trip(tiny_cfg, tmp_path):
    trainer = Trainer(tiny_cfg, {"a": 0, "b": 1})
    batch = collate(toy_items(tiny_cfg))
    trainer.train_step(batch)
    trainer.save(tmp_path / "c.pt")
    restored = Trainer.load(tmp_path / "c.pt")
    src = synth_utterance(5, DEFAULT_SPEAKERS[1], 24000, 0.6)
    a = trainer.converter().convert(src, "a", seed=3).samples
    b = VoiceConverter.from_checkpoint(tmp_path / "c.pt").convert(src, "a", seed=3).samples
    assert np.array_equal(a, b)
    # training continues identically from the restored state
    assert trainer.train_step(batch) == restored.train_step(batch)


def test_checkpoint_version_checked(tmp_path):
    torch.save({"version": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        VoiceConverter.from_checkpoint(tmp_path / "bad.pt")


# -- precomputed linguistic features -----------------------------------------


def test_precomputed_linguistic_features(tmp_path):
    cfg = TrainConfig.tiny()
    cfg.model.linguistic_source = "precomputed"
    cfg.model.linguistic_subsample = 2
    items = toy_items(cfg)
    for it in items:
        frames = it["spec"].shape[-1]
        it["ppg"] = torch.randn(cfg.model.linguistic_channels, -(-frames // 2))
    trainer = Trainer(cfg, {"a": 0, "b": 1})
    assert trainer.model.linguistic is None
    assert np.isfinite(trainer.train_step(collate(items)).total)
    src = synth_utterance(0, DEFAULT_SPEAKERS[0], 24000, 0.5)
    ppg = np.random.default_rng(0).standard_normal((30, cfg.model.linguistic_channels)).astype(np.float32)
    assert len(trainer.converter().convert(src, "a", ppg=ppg)) == -(-12000 // HOP) * HOP
    with pytest.raises(DataError):
        trainer.converter().convert(src, "a")


# -- manifests and config -----------------------------------------------------


def test_manifest_round_trip_and_errors(tmp_path):
    wav = tmp_path / "audio" / "x.wav"
    wav.parent.mkdir()
    save_wav(wav, Waveform(np.zeros(100), 24000))
    ppg = tmp_path / "audio" / "x.ppg"
    write_ppg(ppg, np.zeros((2, 3), np.float32))
    manifest = tmp_path / "train.txt"
    write_manifest(manifest, [UtteranceRecord(str(wav), "s1"), UtteranceRecord(str(wav), "s2", str(ppg))])
    assert manifest.read_text().splitlines() == ["audio/x.wav|s1", "audio/x.wav|s2|audio/x.ppg"]
    recs = read_manifest(manifest)
    assert [r.speaker_id for r in recs] == ["s1", "s2"] and recs[1].ppg_path == str(ppg)

    for bad in ("audio/x.wav", "audio/x.wav||", "audio/missing.wav|s1", ""):
        manifest.write_text(bad + "\n")
        with pytest.raises(DataError):
            read_manifest(manifest)


def test_short_utterance_rejected(tiny_cfg):
    with pytest.raises(DataError):
        utterance_item(torch.zeros(20 * HOP), 0, tiny_cfg)


def test_config_yaml_round_trip_and_unknown_key(tmp_path):
    cfg = TrainConfig.practical(total_steps=7)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "bad.yaml").write_text("model:\n  bogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "hop.yaml").write_text("model:\n  upsample_factors: [8, 8, 2]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "hop.yaml")


def test_too_many_speakers_for_table(tiny_cfg):
    tiny_cfg.model.n_speakers = 1
    with pytest.raises(ConfigError):
        Trainer(tiny_cfg, {"a": 0, "b": 1})
