import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seattack.data import synth_utterance
from seattack.spectral import (
    AudioError, ComplexSpectrogram, FrameMismatch, StftConfig, Waveform, istft, normalize_peak,
    overlap_envelope, read_wav, spectral_energy, stft, write_wav,
)


def _dft_frame(x, cfg, m):
    """Direct O(N^2) DFT of frame m of the padded signal (independent of np.fft)."""
    n = cfg.fft_size
    padded = np.zeros((cfg.n_frames(len(x)) - 1) * cfg.hop + n)
    padded[cfg.pad:cfg.pad + len(x)] = x
    seg = padded[m * cfg.hop:m * cfg.hop + n] * cfg.window_array()
    k = np.arange(cfg.n_bins)[:, None]
    j = np.arange(n)[None, :]
    return (seg[None, :] * np.exp(-2j * np.pi * k * j / n)).sum(axis=1) * cfg.frame_gain


def _overlap_add_reference(spec):
    """Plain loop inverse: inverse DFT per frame, window, overlap-add, divide by sum w^2."""
    cfg = spec.cfg
    n = cfg.fft_size
    w = cfg.window_array()
    t = spec.shape[1]
    out = np.zeros((t - 1) * cfg.hop + n)
    env = np.zeros_like(out)
    j = np.arange(n)
    for m in range(t):
        full = np.concatenate([spec.bins[:, m], np.conj(spec.bins[-2:0:-1, m])]) / cfg.frame_gain
        frame = np.real(np.array([np.sum(full * np.exp(2j * np.pi * np.arange(n) * q / n)) for q in j])) / n
        out[m * cfg.hop:m * cfg.hop + n] += frame * w
        env[m * cfg.hop:m * cfg.hop + n] += w * w
    return out / np.where(env > 0, env, 1.0)


def test_shape_and_frame_count():
    cfg = StftConfig()
    x = Waveform(np.zeros(1000))
    spec = stft(x, cfg)
    assert spec.shape == (256, int(np.ceil((1000 + 255) / 128)))


def test_zero_waveform_gives_zero_spectrogram():
    spec = stft(Waveform(np.zeros(4000)))
    assert np.all(spec.bins == 0)


def test_bin_centred_sine_concentrates_in_its_row(stft_cfg):
    q = 40
    f = q * stft_cfg.sample_rate / stft_cfg.fft_size
    x = np.sin(2 * np.pi * f * np.arange(16000) / stft_cfg.sample_rate)
    spec = stft(Waveform(x), stft_cfg)
    m = spec.shape[1] // 2
    col = np.abs(spec.bins[:, m])
    oracle = np.abs(_dft_frame(x, stft_cfg, m))
    np.testing.assert_allclose(col, oracle, atol=1e-9 * col.max())
    assert int(np.argmax(col)) == q
    # the sine window's leakage for an on-bin tone is |1/(4k^2 - 1)| relative to the peak:
    # -9.5 dB at k = 1, -23.5 dB at k = 2, below -30 dB from k = 3 on
    k = np.abs(np.arange(col.size) - q)
    for d in (1, 2):
        assert 20 * np.log10(col[k == d].max() / col[q]) == pytest.approx(20 * np.log10(1 / (4 * d * d - 1)), abs=0.05)
    assert 20 * np.log10(col[k >= 3].max() / col[q]) < -30


def test_linearity(rng):
    a, b = rng.standard_normal(3000), rng.standard_normal(3000)
    lhs = stft(Waveform(a)).bins + stft(Waveform(b)).bins
    np.testing.assert_allclose(lhs, stft(Waveform(a + b)).bins, atol=1e-10)


def test_round_trip_white_noise_matches_overlap_add_reference(rng):
    x = rng.standard_normal(2000) * 0.3
    spec = stft(Waveform(x))
    y = istft(spec, out_len=len(x)).samples
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6
    ref = _overlap_add_reference(spec)[spec.cfg.pad:spec.cfg.pad + len(x)]
    np.testing.assert_allclose(y, ref, atol=1e-9)


def test_round_trip_speech_like_signal():
    x = synth_utterance(3, 1.0)
    y = istft(stft(x), out_len=len(x))
    assert np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples) <= 1e-6


def test_zero_spectrogram_gives_zero_waveform():
    spec = ComplexSpectrogram(np.zeros((256, 20)))
    assert np.all(istft(spec).samples == 0)


def test_parseval_with_overlap_envelope(rng):
    x = rng.standard_normal(1500)
    spec = stft(Waveform(x))
    env = overlap_envelope(spec.cfg, spec.shape[1])[spec.cfg.pad:spec.cfg.pad + len(x)]
    assert spectral_energy(spec) == pytest.approx(float(np.sum(x * x * env)), rel=1e-10)


def test_white_noise_has_unit_bin_power(rng):
    x = rng.standard_normal(64000)
    spec = stft(Waveform(x))
    assert np.mean(np.abs(spec.bins[1:-1, 4:-4]) ** 2) == pytest.approx(1.0, rel=0.02)


def test_errors():
    with pytest.raises(AudioError):
        stft(Waveform(np.zeros(0)))
    with pytest.raises(AudioError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        StftConfig(fft_size=510, hop=600)
    with pytest.raises(ValueError):
        StftConfig(fft_size=16, hop=16, window="sqrt_hann")   # no overlap: envelope hits zero
    a = ComplexSpectrogram(np.zeros((256, 4)))
    b = ComplexSpectrogram(np.zeros((129, 4)), StftConfig(fft_size=256, hop=64))
    with pytest.raises(FrameMismatch):
        a + b
    with pytest.raises(FrameMismatch):
        istft(a, StftConfig(fft_size=256, hop=64))
    with pytest.raises(ValueError):
        ComplexSpectrogram(np.full((256, 2), np.inf))


def test_normalize_peak():
    w = normalize_peak(Waveform(np.array([0.1, -0.5, 0.2])))
    assert np.max(np.abs(w.samples)) == pytest.approx(0.95)
    z = Waveform(np.zeros(3))
    assert normalize_peak(z) is z


def test_wav_round_trip_zeros(tmp_path):
    w = Waveform(np.zeros(16000))
    write_wav(tmp_path / "z.wav", w)
    back = read_wav(tmp_path / "z.wav")
    assert np.array_equal(back.samples, w.samples) and back.sample_rate == 16000


def test_wav_round_trip_full_scale_sine(tmp_path):
    x = np.sin(2 * np.pi * 440 * np.arange(16000) / 16000)
    write_wav(tmp_path / "s.wav", Waveform(x))
    back = read_wav(tmp_path / "s.wav")
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_wav_malformed_header(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFF" + struct.pack("<I", 100) + b"JUNKJUNK" + b"\0" * 40)
    with pytest.raises(AudioError):
        read_wav(p)
    q = tmp_path / "trunc.wav"
    write_wav(q, Waveform(np.zeros(100)))
    q.write_bytes(q.read_bytes()[:60])
    with pytest.raises(AudioError):
        read_wav(q)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 3000), seed=st.integers(0, 2 ** 31 - 1),
       cfg=st.sampled_from([StftConfig(), StftConfig(fft_size=256, hop=64), StftConfig(fft_size=510, hop=255)]))
def test_property_perfect_reconstruction(n, seed, cfg):
    x = np.random.default_rng(seed).standard_normal(n)
    y = istft(stft(Waveform(x), cfg), out_len=n).samples
    assert np.linalg.norm(y - x) <= 1e-9 * max(np.linalg.norm(x), 1e-12) + 1e-12


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2000), seed=st.integers(0, 2 ** 31 - 1), c=st.floats(-10, 10))
def test_property_homogeneity(n, seed, c):
    x = np.random.default_rng(seed).standard_normal(n)
    np.testing.assert_allclose(stft(Waveform(c * x)).bins, c * stft(Waveform(x)).bins, atol=1e-9)
