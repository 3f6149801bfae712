import wave

import numpy as np
import pytest

from ppgvc.audio_features import (
    LOG_FLOOR,
    AudioFormatError,
    FeatureConfig,
    FeatureConfigMismatch,
    LinearSpectrogram,
    TruncatedAudioError,
    Waveform,
    WaveformTooShortError,
    linear_spectrogram,
    load_wav,
    mel_filterbank,
    mel_spectrogram,
    resample,
    save_wav,
    to_pcm16,
)

SMALL = FeatureConfig(sample_rate=16000, fft_size=64, frame_hop=16, frame_length=48, n_mels=8)


def _write_raw(path, pcm, rate=24000, channels=1, width=2):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(pcm)


def test_load_digital_silence(tmp_path):
    p = tmp_path / "zero.wav"
    _write_raw(p, np.zeros(24000, "<i2").tobytes())
    w = load_wav(p)
    assert w.sample_rate == 24000
    assert len(w) == 24000 and not np.any(w.samples)


def test_load_single_sample(tmp_path):
    p = tmp_path / "one.wav"
    _write_raw(p, np.array([16384], "<i2").tobytes())
    assert load_wav(p).samples.tolist() == [0.5]


def test_pcm_round_trip_bit_identical(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32768, 5000).astype("<i2")
    src, dst = tmp_path / "a.wav", tmp_path / "b.wav"
    _write_raw(src, pcm.tobytes(), rate=16000)
    save_wav(dst, load_wav(src))
    with wave.open(str(dst)) as f:
        assert f.readframes(f.getnframes()) == pcm.tobytes()


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "missing.wav")
    stereo = tmp_path / "stereo.wav"
    _write_raw(stereo, np.zeros(20, "<i2").tobytes(), channels=2)
    with pytest.raises(AudioFormatError):
        load_wav(stereo)
    eight_bit = tmp_path / "u8.wav"
    _write_raw(eight_bit, bytes(20), width=1)
    with pytest.raises(AudioFormatError):
        load_wav(eight_bit)
    truncated = tmp_path / "trunc.wav"
    truncated.write_bytes(b"RIFF\x24\x00\x00\x00WAVEfm")
    with pytest.raises(TruncatedAudioError):
        load_wav(truncated)
    short_payload = tmp_path / "short.wav"
    _write_raw(short_payload, np.zeros(100, "<i2").tobytes())
    short_payload.write_bytes(short_payload.read_bytes()[:-50])
    with pytest.raises(TruncatedAudioError):
        load_wav(short_payload)


def test_waveform_invariants():
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 22050)
    with pytest.raises(ValueError):
        Waveform(np.array([]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.array([1.5]), 16000)


def test_feature_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(frame_hop=2048)
    with pytest.raises(ValueError):
        FeatureConfig(mel_fmin=5000, mel_fmax=4000)
    assert FeatureConfig().mel_fmax == 12000


def test_frame_count_is_ceil_len_over_hop():
    for n in (64, 100, 160, 333, 1000):
        w = Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n), 16000)
        assert linear_spectrogram(w, SMALL).frames == -(-n // SMALL.frame_hop)


def test_zero_waveform_gives_zero_magnitudes():
    lin = linear_spectrogram(Waveform(np.zeros(400), 16000), SMALL)
    assert lin.magnitudes.shape == (25, SMALL.fft_bins)
    assert not np.any(lin.magnitudes)


def test_too_short_waveform():
    with pytest.raises(WaveformTooShortError):
        linear_spectrogram(Waveform(np.zeros(SMALL.frame_length - 1), 16000), SMALL)


def _dft_magnitudes(frame):
    n = frame.size
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)
    return np.abs(basis @ frame)


def _windowed_frame(x, cfg, f):
    """Frame ``f`` rebuilt by hand from the padding/windowing convention."""
    pad_left = (cfg.fft_size - cfg.frame_hop) // 2
    start = f * cfg.frame_hop - pad_left
    assert start >= 0 and start + cfg.fft_size <= x.size
    n = np.arange(cfg.frame_length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.frame_length)
    window = np.zeros(cfg.fft_size)
    off = (cfg.fft_size - cfg.frame_length) // 2
    window[off : off + cfg.frame_length] = hann
    return x[start : start + cfg.fft_size] * window


def test_magnitudes_match_direct_dft():
    x = np.random.default_rng(1).uniform(-0.9, 0.9, 512)
    lin = linear_spectrogram(Waveform(x, 16000), SMALL)
    for f in (3, 10, 20):
        frame = _windowed_frame(x.astype(np.float32).astype(np.float64), SMALL, f)
        np.testing.assert_allclose(lin.magnitudes[f], _dft_magnitudes(frame), rtol=1e-5, atol=1e-5)


def test_parseval_per_frame():
    x = np.random.default_rng(2).uniform(-0.9, 0.9, 512).astype(np.float32).astype(np.float64)
    lin = linear_spectrogram(Waveform(x, 16000), SMALL)
    n = SMALL.fft_size
    weights = np.full(SMALL.fft_bins, 2.0)
    weights[0] = weights[-1] = 1.0
    for f in range(3, 25):
        frame = _windowed_frame(x, SMALL, f)
        lhs = np.sum(weights * lin.magnitudes[f].astype(np.float64) ** 2)
        assert lhs == pytest.approx(n * np.sum(frame**2), rel=1e-5)


def test_bin_centred_sinusoid_peaks_at_its_bin():
    k = 5
    # cosine symmetric about both end samples so reflect padding stays smooth
    n = np.arange(801)
    x = 0.5 * np.cos(2 * np.pi * k * n / SMALL.fft_size)
    lin = linear_spectrogram(Waveform(x, 16000), SMALL)
    assert np.all(np.argmax(lin.magnitudes, axis=1) == k)


def test_mel_of_zero_is_log_floor():
    lin = LinearSpectrogram(np.zeros((7, SMALL.fft_bins), np.float32), SMALL.frame_hop, SMALL.frame_length)
    mel = mel_spectrogram(lin, SMALL)
    assert mel.values.shape == (7, SMALL.n_mels)
    np.testing.assert_allclose(mel.values, np.log(LOG_FLOOR), rtol=1e-6)


def test_filterbank_support_and_positive_rows():
    cfg = FeatureConfig(mel_fmin=300.0, mel_fmax=8000.0)
    fb = mel_filterbank(cfg)
    assert fb.shape == (80, cfg.fft_bins)
    assert np.all(fb.sum(axis=1) > 0)
    freqs = np.arange(cfg.fft_bins) * cfg.sample_rate / cfg.fft_size
    outside = (freqs < cfg.mel_fmin) | (freqs > cfg.mel_fmax)
    assert not np.any(fb[:, outside])


def test_filterbank_area_normalised():
    cfg = FeatureConfig(fft_size=8192, frame_length=8192, n_mels=20)
    fb = mel_filterbank(cfg)
    bin_hz = cfg.sample_rate / cfg.fft_size
    # area of each triangle (in Hz) is 1 under the normalisation
    np.testing.assert_allclose(fb.sum(axis=1) * bin_hz, 1.0, rtol=0.02)


def test_mel_increases_when_magnitudes_double():
    x = np.random.default_rng(3).uniform(-0.4, 0.4, 600)
    lin = linear_spectrogram(Waveform(x, 16000), SMALL)
    doubled = LinearSpectrogram(lin.magnitudes * 2, lin.frame_hop, lin.frame_length)
    a, b = mel_spectrogram(lin, SMALL).values, mel_spectrogram(doubled, SMALL).values
    above = a > np.log(LOG_FLOOR) + 1e-6
    assert np.all(b[above] > a[above])


def test_mel_config_mismatch():
    lin = LinearSpectrogram(np.zeros((4, 10), np.float32), SMALL.frame_hop, SMALL.frame_length)
    with pytest.raises(FeatureConfigMismatch):
        mel_spectrogram(lin, SMALL)


def test_mel_frames_equal_linear_frames_and_determinism():
    rng = np.random.default_rng(4)
    for n in (48, 200, 777):
        w = Waveform(rng.uniform(-1, 1, n), 16000)
        lin = linear_spectrogram(w, SMALL)
        assert mel_spectrogram(lin, SMALL).frames == lin.frames
        again = linear_spectrogram(w, SMALL)
        assert np.array_equal(lin.magnitudes, again.magnitudes)


def test_amplification_never_decreases_magnitudes():
    x = np.random.default_rng(5).uniform(-0.3, 0.3, 500)
    a = linear_spectrogram(Waveform(x, 16000), SMALL).magnitudes
    b = linear_spectrogram(Waveform(2.5 * x, 16000), SMALL).magnitudes
    assert np.all(b >= a)


def test_resample_paths():
    t = np.arange(48000) / 48000
    w48 = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), 48000)
    w24 = resample(w48, 24000)
    w16 = resample(w24, 16000)
    assert (len(w24), len(w16)) == (24000, 16000)
    spec = np.abs(np.fft.rfft(w16.samples))
    assert np.argmax(spec) == 440


def test_to_pcm16_clips():
    assert to_pcm16(np.array([1.0, -1.0])).tolist() == [32767, -32768]
