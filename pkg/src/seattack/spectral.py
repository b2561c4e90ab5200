"""Complex STFT analysis/synthesis, waveform containers and 16-bit WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
INGEST_PEAK = 0.95


class AudioError(ValueError):
    """Raised for invalid waveforms and unsupported or corrupt WAV files."""


class FrameMismatch(ValueError):
    """Spectrograms produced with different STFT parameters were combined."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioError("waveform must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise AudioError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", _frozen(s))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def normalize_peak(w: Waveform, peak: float = INGEST_PEAK) -> Waveform:
    """Scale ``w`` so that max |sample| equals ``peak`` (silence is returned unchanged)."""
    m = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if m == 0.0:
        return w
    return Waveform(w.samples * (peak / m), w.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 510
    hop: int = 128
    window: str = "sqrt_hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size % 2:
            raise ValueError("fft_size must be an even integer >= 2")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("hop must satisfy 0 < hop <= fft_size")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        # Overlap-add must cover every interior sample (envelope bounded away from 0).
        env = _steady_envelope(self.window_array(), self.hop)
        if env.min() <= 1e-8 * env.max():
            raise ValueError("window/hop pair violates the overlap-add condition")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.fft_size // 2

    def window_array(self) -> np.ndarray:
        return _WINDOWS[self.window](self.fft_size)

    @property
    def frame_gain(self) -> float:
        """Analysis scaling 1/sqrt(sum w^2): unit-variance white noise gives E|X|^2 = 1."""
        return float(1.0 / np.sqrt(np.sum(self.window_array() ** 2)))

    def n_frames(self, n_samples: int) -> int:
        return int(np.ceil((n_samples + self.pad) / self.hop))

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size


def _sqrt_hann(n: int) -> np.ndarray:
    # periodic Hann; its square root equals sin(pi k / n)
    return np.sin(np.pi * np.arange(n) / n)


def _hann(n: int) -> np.ndarray:
    return np.sin(np.pi * np.arange(n) / n) ** 2


_WINDOWS = {"sqrt_hann": _sqrt_hann, "hann": _hann}


def _steady_envelope(win: np.ndarray, hop: int) -> np.ndarray:
    n = len(win)
    count = 2 * (n // hop + 1) + 1
    env = np.zeros((count - 1) * hop + n)
    for k in range(count):
        env[k * hop:k * hop + n] += win ** 2
    mid = (count // 2) * hop
    return env[mid:mid + hop]


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F x T grid of complex STFT coefficients (rows: frequency, columns: frames)."""

    bins: np.ndarray
    cfg: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        if b.ndim != 2 or b.shape[0] != self.cfg.n_bins:
            raise ValueError(f"expected ({self.cfg.n_bins}, T) grid, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "bins", _frozen(b))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape

    def _check(self, other: "ComplexSpectrogram"):
        if not isinstance(other, ComplexSpectrogram):
            return NotImplemented
        if other.cfg != self.cfg:
            raise FrameMismatch("spectrograms have different frame parameters")
        if other.shape != self.shape:
            raise FrameMismatch(f"shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other):
        self._check(other)
        return ComplexSpectrogram(self.bins + other.bins, self.cfg)

    def __sub__(self, other):
        self._check(other)
        return ComplexSpectrogram(self.bins - other.bins, self.cfg)

    def scaled(self, c: float) -> "ComplexSpectrogram":
        return ComplexSpectrogram(self.bins * c, self.cfg)

    def with_bins(self, bins: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.cfg)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.bins.real ** 2 + self.bins.imag ** 2)))

    @classmethod
    def zeros_like(cls, other: "ComplexSpectrogram") -> "ComplexSpectrogram":
        return cls(np.zeros(other.shape, dtype=np.complex128), other.cfg)


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if len(w) == 0:
        raise AudioError("cannot analyse an empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    n, hop, t = cfg.fft_size, cfg.hop, cfg.n_frames(len(w))
    padded = np.zeros((t - 1) * hop + n)
    padded[cfg.pad:cfg.pad + len(w)] = w.samples
    idx = np.arange(t)[:, None] * hop + np.arange(n)[None, :]
    frames = padded[idx] * cfg.window_array()
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T * cfg.frame_gain, cfg)


def overlap_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Sum of squared, shifted windows over the padded signal span."""
    win2 = cfg.window_array() ** 2
    env = np.zeros((n_frames - 1) * cfg.hop + cfg.fft_size)
    for m in range(n_frames):
        env[m * cfg.hop:m * cfg.hop + cfg.fft_size] += win2
    return env


def max_synth_length(cfg: StftConfig, n_frames: int) -> int:
    env = overlap_envelope(cfg, n_frames)[cfg.pad:]
    bad = np.flatnonzero(env <= 1e-10)
    return int(bad[0]) if bad.size else env.shape[0]


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None, out_len: int | None = None) -> Waveform:
    """Weighted overlap-add inverse; exact for any window/hop pair accepted by StftConfig."""
    cfg = cfg or spec.cfg
    if cfg != spec.cfg:
        raise FrameMismatch("spectrogram was produced with different frame parameters")
    t = spec.shape[1]
    limit = max_synth_length(cfg, t)
    if out_len is None:
        out_len = limit
    if out_len > limit or out_len < 1:
        raise AudioError(f"out_len={out_len} outside synthesizable range [1, {limit}]")
    n, hop = cfg.fft_size, cfg.hop
    frames = np.fft.irfft(spec.bins.T / cfg.frame_gain, n=n, axis=1) * cfg.window_array()
    out = np.zeros((t - 1) * hop + n)
    for m in range(t):
        out[m * hop:m * hop + n] += frames[m]
    env = overlap_envelope(cfg, t)
    seg = slice(cfg.pad, cfg.pad + out_len)
    return Waveform(out[seg] / env[seg], cfg.sample_rate)


def spectral_energy(spec: ComplexSpectrogram) -> float:
    """Energy summed over the full two-sided spectrum, undoing the frame gain.

    Equals sum_n x[n]^2 * env[n] for the waveform the spectrogram came from,
    where env is :func:`overlap_envelope` (Parseval per frame).
    """
    p = np.abs(spec.bins) ** 2
    weight = np.full(spec.shape[0], 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0
    return float(np.sum(p * weight[:, None]) / (spec.cfg.fft_size * spec.cfg.frame_gain ** 2))


# -- WAV ---------------------------------------------------------------------

def read_wav(path: str | Path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            ch, width, rate, nframes = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            comp = f.getcomptype()
            if comp != "NONE":
                raise AudioError(f"unsupported compression {comp!r}")
            if ch != 1:
                raise AudioError(f"expected mono, got {ch} channels")
            if width != 2:
                raise AudioError(f"expected 16-bit PCM, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise AudioError(f"expected {SAMPLE_RATE} Hz, got {rate} Hz")
            raw = f.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from exc
    if len(raw) != 2 * nframes:
        raise AudioError(f"truncated data chunk in {path}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise AudioError(f"only {SAMPLE_RATE} Hz output is supported")
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
