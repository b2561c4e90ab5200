"""MPEG-1 psychoacoustic model 1 on the STFT grid, and the perturbation gate.

The hearing threshold is evaluated frame by frame directly on the rows of the
analysis STFT, so it lines up bin-for-bin with the perturbation.  Levels use
the MPEG-1 convention that a full-scale sinusoid reads 96 dB SPL.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectral import ComplexSpectrogram, StftConfig

FULL_SCALE_SPL = 96.0
D_FLOOR = -120.0
PSD_FLOOR = -200.0
TONAL_MIN_PROMINENCE = 7.0

# Critical band edges of the 25-band Zwicker partition (Hz).
CRITICAL_BAND_EDGES = np.array([
    0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720, 2000, 2320,
    2700, 3150, 3700, 4400, 5300, 6400, 7700, 9500, 12000, 15500, 1e9,
])


class PsychoacousticError(ValueError):
    pass


def threshold_in_quiet(f) -> np.ndarray | float:
    """Absolute threshold of hearing in dB SPL (Terhardt's approximation)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 20.0):
        raise PsychoacousticError("threshold in quiet is defined for f >= 20 Hz")
    k = f / 1000.0
    out = 3.64 * k ** -0.8 - 6.5 * np.exp(-0.6 * (k - 3.3) ** 2) + 1e-3 * k ** 4
    return float(out) if out.ndim == 0 else out


def bark(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def row_frequencies(cfg: StftConfig) -> np.ndarray:
    """Centre frequency of every STFT row, with the DC row clamped to 20 Hz."""
    return np.maximum(cfg.bin_frequencies(), 20.0)


@dataclass(frozen=True)
class HearingThreshold:
    """Per-bin audibility limit ``h`` (dB SPL), fixed for one utterance.

    ``peak_level`` is the SPL of the loudest mixture bin.  Subtracting it puts
    the threshold on the same peak-relative scale as the spectral difference.
    """

    h: np.ndarray
    spl_offset: float = FULL_SCALE_SPL
    peak_level: float = FULL_SCALE_SPL

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise PsychoacousticError("hearing threshold must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def relative(self) -> np.ndarray:
        return self.h - self.peak_level


@dataclass(frozen=True)
class GateMask:
    phi_star: np.ndarray
    phi_hat: np.ndarray


# -- model 1 -------------------------------------------------------------------------

def _spl_scale(cfg: StftConfig) -> float:
    # amplitude-A sine centred on a bin has |X| = A * gain * sum(w) / 2
    return 2.0 / (cfg.frame_gain * float(np.sum(cfg.window_array())))


def power_spectrum_db(spec: ComplexSpectrogram, spl_offset: float = FULL_SCALE_SPL) -> np.ndarray:
    """Normalised PSD in dB SPL for every bin of ``spec``."""
    mag = np.abs(spec.bins) * _spl_scale(spec.cfg)
    with np.errstate(divide="ignore"):
        p = spl_offset + 20.0 * np.log10(mag)
    return np.maximum(p, PSD_FLOOR)


def _tonal_offsets(k: int, n_bins: int) -> np.ndarray:
    # neighbourhood widths of model 1 for a 512-point analysis (scaled by index)
    if k < 63 * n_bins / 257:
        return np.array([2])
    if k < 127 * n_bins / 257:
        return np.array([2, 3])
    return np.array([2, 3, 4, 5, 6])


def _db_sum(levels) -> float:
    levels = np.asarray(levels, dtype=np.float64)
    return float(10.0 * np.log10(np.sum(10.0 ** (0.1 * levels))))


def find_tonal_maskers(p: np.ndarray) -> list[tuple[int, float]]:
    """Local maxima at least 7 dB above their model-1 neighbourhood."""
    n = p.shape[0]
    out = []
    for k in range(2, n - 7):
        if not (p[k] > p[k - 1] and p[k] >= p[k + 1]):
            continue
        offs = _tonal_offsets(k, n)
        if np.all(p[k] >= p[k + offs] + TONAL_MIN_PROMINENCE) and \
                np.all(p[k] >= p[k - offs] + TONAL_MIN_PROMINENCE):
            out.append((k, _db_sum(p[k - 1:k + 2])))
    return out


def find_noise_maskers(p: np.ndarray, freqs: np.ndarray, tonal: list) -> list[tuple[int, float]]:
    """Per critical band: power sum of the bins not claimed by a tonal masker,
    placed at the band's geometric-mean bin."""
    n = p.shape[0]
    excluded = np.zeros(n, dtype=bool)
    for k, _ in tonal:
        offs = _tonal_offsets(k, n)
        lo, hi = max(k - offs.max(), 0), min(k + offs.max(), n - 1)
        excluded[lo:hi + 1] = True
    band = np.searchsorted(CRITICAL_BAND_EDGES, freqs, side="right") - 1
    out = []
    for b in np.unique(band):
        rows = np.flatnonzero((band == b) & ~excluded & (np.arange(n) > 0))
        if rows.size == 0:
            continue
        level = _db_sum(p[rows])
        centre = int(round(float(np.exp(np.mean(np.log(rows.astype(float)))))))
        out.append((centre, level))
    return out


def decimate_maskers(tonal, noise, z: np.ndarray, quiet: np.ndarray):
    """Drop maskers below the threshold in quiet, then keep only the strongest
    masker within any 0.5 Bark window."""
    tonal = [(k, l) for k, l in tonal if l >= quiet[k]]
    noise = [(k, l) for k, l in noise if l >= quiet[k]]
    pool = sorted([(k, l, True) for k, l in tonal] + [(k, l, False) for k, l in noise],
                  key=lambda m: (z[m[0]], m[0]))
    changed = True
    while changed:
        changed = False
        for i in range(len(pool) - 1):
            a, b = pool[i], pool[i + 1]
            if z[b[0]] - z[a[0]] < 0.5:
                pool.pop(i if a[1] < b[1] else i + 1)
                changed = True
                break
    return [(k, l) for k, l, t in pool if t], [(k, l) for k, l, t in pool if not t]


def spreading(dz: np.ndarray, level: float) -> np.ndarray:
    """Two-slope spreading function of model 1 (dB); -inf outside [-3, 8) Bark."""
    sf = np.full(dz.shape, -np.inf)
    m = (dz >= -3) & (dz < -1)
    sf[m] = 17.0 * dz[m] - 0.4 * level + 11.0
    m = (dz >= -1) & (dz < 0)
    sf[m] = (0.4 * level + 6.0) * dz[m]
    m = (dz >= 0) & (dz < 1)
    sf[m] = -17.0 * dz[m]
    m = (dz >= 1) & (dz < 8)
    sf[m] = (0.15 * level - 17.0) * dz[m] - 0.15 * level
    return sf


def frame_threshold(p: np.ndarray, freqs: np.ndarray, quiet: np.ndarray | None = None) -> np.ndarray:
    """Global masking threshold (dB SPL) for one frame's PSD ``p``."""
    z = bark(freqs)
    if quiet is None:
        quiet = threshold_in_quiet(freqs)
    tonal = find_tonal_maskers(p)
    noise = find_noise_maskers(p, freqs, tonal)
    tonal, noise = decimate_maskers(tonal, noise, z, quiet)
    excess = np.zeros_like(p)
    for maskers, slope, offset in ((tonal, 0.275, 6.025), (noise, 0.175, 2.025)):
        for k, level in maskers:
            t = level - slope * z[k] + spreading(z - z[k], level) - offset
            excess += 10.0 ** (0.1 * (t - quiet))
    # power sum with the quiet threshold; equals ``quiet`` exactly with no maskers
    return quiet + 10.0 * np.log10(1.0 + excess)


def hearing_threshold(y_user: ComplexSpectrogram, spl_offset: float = FULL_SCALE_SPL) -> HearingThreshold:
    """Model-1 hearing threshold for every bin of the mixture spectrogram."""
    cfg = y_user.cfg
    if cfg.n_bins < 16:
        raise PsychoacousticError("frame too short for the model's spectral resolution")
    freqs = row_frequencies(cfg)
    quiet = threshold_in_quiet(freqs)
    p = power_spectrum_db(y_user, spl_offset)
    h = np.empty(p.shape)
    for n in range(p.shape[1]):
        h[:, n] = frame_threshold(p[:, n], freqs, quiet)
    peak = float(np.max(np.abs(y_user.bins)))
    peak_level = spl_offset + 20.0 * np.log10(peak * _spl_scale(cfg)) if peak > 0 else spl_offset
    return HearingThreshold(h, spl_offset, peak_level)


# -- gating --------------------------------------------------------------------------

def spectral_difference(delta, y_user) -> np.ndarray:
    """D = 20 log10(|delta| / max|Y|) per bin, floored at -120 dB."""
    d = np.asarray(getattr(delta, "bins", delta))
    y = np.asarray(getattr(y_user, "bins", y_user))
    if d.shape != y.shape:
        raise PsychoacousticError(f"shape mismatch {d.shape} vs {y.shape}")
    peak = float(np.max(np.abs(y)))
    if peak == 0.0:
        raise PsychoacousticError("mixture spectrogram is identically zero")
    with np.errstate(divide="ignore"):
        out = 20.0 * np.log10(np.abs(d) / peak)
    return np.maximum(out, D_FLOOR)


def gate(h, d: np.ndarray, lam: float) -> GateMask:
    """Phi* = max(H - D + lambda, 0) and its min-max normalisation Phi_hat.

    ``h`` is a grid (or a HearingThreshold, whose peak-relative grid is used).
    A constant Phi* maps to all ones if positive and all zeros otherwise.
    """
    hv = h.relative if isinstance(h, HearingThreshold) else np.asarray(h, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.shape(hv) != d.shape and np.ndim(hv) != 0:
        raise PsychoacousticError(f"shape mismatch {np.shape(hv)} vs {d.shape}")
    phi_star = np.maximum(hv - d + lam, 0.0)
    lo, hi = float(phi_star.min()), float(phi_star.max())
    if hi > lo:
        phi_hat = (phi_star - lo) / (hi - lo)
    else:
        phi_hat = np.full(phi_star.shape, 1.0 if hi > 0 else 0.0)
    return GateMask(phi_star, phi_hat)


def dump_grids_csv(path: str | Path, **grids: np.ndarray) -> None:
    """Write named F x T grids as long-format CSV rows ``row,frame,<name>...``."""
    names = sorted(grids)
    arrays = [np.asarray(grids[n]) for n in names]
    shape = arrays[0].shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "frame"] + names)
        for q in range(shape[0]):
            for n in range(shape[1]):
                w.writerow([q, n] + [repr(float(a[q, n])) for a in arrays])
