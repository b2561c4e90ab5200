import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seattack.psychoacoustics import (
    D_FLOOR, HearingThreshold, PsychoacousticError, dump_grids_csv, frame_threshold, gate, hearing_threshold,
    power_spectrum_db, row_frequencies, spectral_difference, threshold_in_quiet,
)
from seattack.spectral import ComplexSpectrogram, StftConfig, Waveform, stft


def _terhardt(f):
    k = f / 1000.0
    return 3.64 * k ** -0.8 - 6.5 * math.exp(-0.6 * (k - 3.3) ** 2) + 1e-3 * k ** 4


def _bark(f):
    return 13 * math.atan(0.00076 * f) + 3.5 * math.atan((f / 7500) ** 2)


def _spread(dz, level):
    if -3 <= dz < -1:
        return 17 * dz - 0.4 * level + 11
    if -1 <= dz < 0:
        return (0.4 * level + 6) * dz
    if 0 <= dz < 1:
        return -17 * dz
    if 1 <= dz < 8:
        return (0.15 * level - 17) * dz - 0.15 * level
    return -math.inf


@pytest.mark.parametrize("f, expect, tol", [(1000.0, 3.37, 0.005), (3300.0, -4.98, 0.005), (20.0, 83.2, 0.05)])
def test_threshold_in_quiet_examples(f, expect, tol):
    # tolerance is half a unit in the last quoted digit
    assert threshold_in_quiet(f) == pytest.approx(expect, abs=tol)


def test_threshold_in_quiet_matches_formula_at_50_frequencies():
    fs = np.geomspace(20, 8000, 50)
    ours = threshold_in_quiet(fs)
    assert np.max(np.abs(ours - np.array([_terhardt(f) for f in fs]))) <= 0.01
    with pytest.raises(PsychoacousticError):
        threshold_in_quiet(10.0)


def test_silence_gives_quiet_threshold_exactly(stft_cfg):
    spec = ComplexSpectrogram(np.zeros((256, 5)), stft_cfg)
    h = hearing_threshold(spec)
    quiet = threshold_in_quiet(row_frequencies(stft_cfg))
    assert np.array_equal(h.h, np.repeat(quiet[:, None], 5, axis=1))


def test_single_tonal_masker_matches_hand_trace(stft_cfg):
    freqs = row_frequencies(stft_cfg)
    quiet = threshold_in_quiet(freqs)
    k, level = 32, 80.0
    p = np.full(256, -200.0)
    p[k] = level
    h = frame_threshold(p, freqs, quiet)
    zk = _bark(freqs[k])
    for i in range(256):
        t = level - 0.275 * zk + _spread(_bark(freqs[i]) - zk, level) - 6.025
        expect = 10 * math.log10(10 ** (quiet[i] / 10) + (10 ** (t / 10) if t > -math.inf else 0.0))
        assert h[i] == pytest.approx(expect, abs=1e-9)


def test_1khz_tone_masks_its_neighbourhood_only(stft_cfg):
    n = np.arange(16000)
    spec = stft(Waveform(0.5 * np.sin(2 * np.pi * 1000 * n / 16000)), stft_cfg)
    h = hearing_threshold(spec)
    freqs = row_frequencies(stft_cfg)
    excess = h.h[:, 60] - threshold_in_quiet(freqs)
    near = (freqs > 800) & (freqs < 1300)
    assert np.all(excess[near] > 10.0)
    # remote rows: 16 kHz sampling has no 12 kHz row, so use everything above 6 kHz
    assert np.max(excess[freqs > 6000]) <= 1.0


def test_level_shift_moves_threshold_in_masker_rows(stft_cfg):
    n = np.arange(16000)
    x = 0.05 * np.sin(2 * np.pi * 1000 * n / 16000) + 0.02 * np.sin(2 * np.pi * 2500 * n / 16000)
    lo = hearing_threshold(stft(Waveform(x), stft_cfg))
    hi = hearing_threshold(stft(Waveform(10 * x), stft_cfg))
    freqs = row_frequencies(stft_cfg)
    quiet = threshold_in_quiet(freqs)
    col = 60
    # the masker row and the row above it sit on the -17 dB/Bark skirt, which does not depend on L;
    # the lower skirt (0.4 L + 6) dz does, so rows below the masker move by less than 20 dB
    for f0 in (1000, 2500):
        q = int(np.argmin(np.abs(freqs - f0)))
        rows = np.array([q, q + 1])
        assert np.all(lo.h[rows, col] - quiet[rows] > 20)
        np.testing.assert_allclose(hi.h[rows, col] - lo.h[rows, col], 20.0, atol=0.05)
        assert np.all(hi.h[q - 2, col] - lo.h[q - 2, col] < 20.0)


def test_power_spectrum_full_scale_reads_96_db(stft_cfg):
    q = 64
    f = q * 16000 / stft_cfg.fft_size
    spec = stft(Waveform(np.sin(2 * np.pi * f * np.arange(8000) / 16000)), stft_cfg)
    # the negative-frequency image leaks about 1e-5 relative amplitude into the row
    assert power_spectrum_db(spec)[q, 20] == pytest.approx(96.0, abs=1e-3)


def test_spectral_difference_examples():
    y = np.zeros((256, 3), complex)
    y[10, 1] = 4.0
    d = np.zeros_like(y)
    d[0, 0] = 4.0
    d[1, 0] = 0.4
    out = spectral_difference(d, y)
    assert out[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert out[1, 0] == pytest.approx(-20.0, abs=1e-12)
    assert np.all(spectral_difference(np.zeros_like(y), y) == D_FLOOR)
    with pytest.raises(PsychoacousticError):
        spectral_difference(d, np.zeros_like(y))
    with pytest.raises(PsychoacousticError):
        spectral_difference(d[:, :2], y)


def test_gate_examples():
    h, d = np.array([[60.0, 60.0]]), np.array([[65.0, 40.0]])
    g0 = gate(h, d, 0.0)
    assert g0.phi_star[0, 0] == 0.0
    g20 = gate(h, d, 20.0)
    assert g20.phi_star[0, 0] == 15.0
    assert g20.phi_hat[0, 0] == 0.0 and g20.phi_hat[0, 1] == 1.0
    assert np.all(gate(np.array([[1.0, 1.0]]), np.zeros((1, 2)), 0.0).phi_hat == 1.0)
    assert np.all(gate(np.array([[0.0, 0.0]]), np.full((1, 2), 5.0), 0.0).phi_hat == 0.0)


def test_gate_uses_peak_relative_threshold():
    th = HearingThreshold(np.full((2, 2), 50.0), peak_level=80.0)
    g = gate(th, np.array([[-30.0, -40.0], [-20.0, -30.0]]), 0.0)
    np.testing.assert_array_equal(g.phi_star, [[0.0, 10.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), l1=st.floats(-20, 60), dl=st.floats(0, 60))
def test_property_phi_star_monotone_in_lambda(seed, l1, dl):
    r = np.random.default_rng(seed)
    h = r.uniform(-100, 0, (16, 9))
    d = r.uniform(-120, 0, (16, 9))
    assert np.all(gate(h, d, l1 + dl).phi_star >= gate(h, d, l1).phi_star)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), lam=st.floats(-50, 80))
def test_property_gate_range(seed, lam):
    r = np.random.default_rng(seed)
    g = gate(r.uniform(-100, 0, (8, 5)), r.uniform(-120, 0, (8, 5)), lam)
    assert np.all(g.phi_star >= 0)
    assert np.all((g.phi_hat >= 0) & (g.phi_hat <= 1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), c=st.floats(1e-3, 1e3))
def test_property_spectral_difference_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    y = r.standard_normal((6, 4)) + 1j * r.standard_normal((6, 4))
    d = r.standard_normal((6, 4)) * 0.1
    np.testing.assert_allclose(spectral_difference(c * d, c * y), spectral_difference(d, y), atol=1e-9)


def test_threshold_is_never_below_quiet(stft_cfg, rng):
    spec = stft(Waveform(rng.standard_normal(4000) * 0.1), stft_cfg)
    h = hearing_threshold(spec)
    quiet = threshold_in_quiet(row_frequencies(stft_cfg))
    assert np.all(h.h >= quiet[:, None] - 1e-12)


def test_dump_grids_csv(tmp_path):
    dump_grids_csv(tmp_path / "g.csv", h=np.ones((2, 3)), d=np.zeros((2, 3)))
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "row,frame,d,h" and len(lines) == 7


def test_short_frames_rejected():
    cfg = StftConfig(fft_size=16, hop=8)
    with pytest.raises(PsychoacousticError):
        hearing_threshold(ComplexSpectrogram(np.zeros((9, 2)), cfg))
