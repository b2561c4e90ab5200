"""Synthetic corpus, mixtures, attack pairs and the toy training loops."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DualTensor
from .models import (
    NetParams, PredictiveParams, ScoreParams, SdeConfig, crm_apply, direct_map, fit_input_scale,
    init_predictive, init_score, marginal_mean, marginal_std, score_condition, score_from_condition,
)
from .spectral import INGEST_PEAK, SAMPLE_RATE, ComplexSpectrogram, StftConfig, Waveform, normalize_peak, stft

SNR_RANGE = (-2.5, 17.5)
T_MIN = 0.03
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# -- pseudo-speech ---------------------------------------------------------------------

def _smooth_track(rng, n: int, n_knots: int, lo: float, hi: float) -> np.ndarray:
    knots = rng.uniform(lo, hi, n_knots)
    return np.interp(np.arange(n), np.linspace(0, n - 1, n_knots), knots)


def synth_utterance(seed: int, duration: float = 1.5, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Deterministic pseudo-speech: a glottal-like harmonic source with a gliding
    f0, three moving formant resonances and syllabic amplitude modulation."""
    if not 1.0 <= duration <= 4.0:
        raise DataError("duration must lie in [1 s, 4 s]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5e]))
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    n_syl = max(2, int(duration * rng.uniform(3.0, 5.0)))

    base = rng.uniform(90.0, 240.0)
    f0 = base * np.exp(_smooth_track(rng, n, n_syl + 1, -0.25, 0.25))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    formants = [_smooth_track(rng, n, n_syl + 1, lo, hi)
                for lo, hi in ((300, 850), (900, 2300), (2200, 3300))]
    widths = (90.0, 140.0, 220.0)
    gains = (1.0, 0.6, 0.3)

    x = np.zeros(n)
    for k in range(1, int(3800 / f0.min()) + 1):
        fk = k * f0
        amp = np.zeros(n)
        for fc, bw, gn in zip(formants, widths, gains):
            amp += gn / (1.0 + ((fk - fc) / bw) ** 2)
        amp *= (fk < 3800) / k ** 0.5
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # syllables: raised-cosine bursts separated by short pauses
    env = np.zeros(n)
    edges = np.sort(rng.uniform(0, n, n_syl - 1)).astype(int)
    bounds = np.concatenate([[0], edges, [n]])
    for a, b in zip(bounds[:-1], bounds[1:]):
        span = b - a
        if span < 8:
            continue
        on = int(span * rng.uniform(0.7, 0.9))
        env[a:a + on] = np.sin(np.pi * np.arange(on) / on) ** 0.6 * rng.uniform(0.5, 1.0)
    x *= env * (1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
    return normalize_peak(Waveform(x, sample_rate))


def synth_noise(seed: int, n_samples: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Coloured Gaussian noise plus a few amplitude-modulated tonal interferers."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x40]))
    spec = rng.standard_normal(n_samples // 2 + 1) + 1j * rng.standard_normal(n_samples // 2 + 1)
    f = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    tilt = rng.uniform(-1.0, 0.5)
    corner = rng.uniform(500.0, 4000.0)
    shape = (1.0 + f / corner) ** tilt / np.sqrt(1.0 + (f / 7000.0) ** 8)
    x = np.fft.irfft(spec * shape, n=n_samples)
    x /= np.sqrt(np.mean(x ** 2)) + 1e-12
    t = np.arange(n_samples) / sample_rate
    for _ in range(rng.integers(1, 4)):
        fc = rng.uniform(150.0, 6000.0)
        am = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.5, 8.0) * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.2, 1.0) * am * np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))
    return normalize_peak(Waveform(x, sample_rate))


def mixture_gain(clean: Waveform, noise: Waveform, snr_db: float) -> float:
    c = float(np.linalg.norm(clean.samples))
    m = float(np.linalg.norm(noise.samples))
    if c == 0.0:
        raise DataError("clean signal is silent")
    if m == 0.0:
        raise DataError("noise signal is silent")
    return c / (m * 10.0 ** (snr_db / 20.0))


def make_mixture(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Y = clean + alpha * noise with the SNR set exactly by alpha."""
    if len(clean) != len(noise):
        raise DataError(f"length mismatch {len(clean)} vs {len(noise)}")
    if clean.sample_rate != noise.sample_rate:
        raise DataError("sample-rate mismatch")
    a = mixture_gain(clean, noise, snr_db)
    return Waveform(clean.samples + a * noise.samples, clean.sample_rate)


def realized_snr(clean: Waveform, mixture: Waveform) -> float:
    resid = mixture.samples - clean.samples
    return 20.0 * math.log10(np.linalg.norm(clean.samples) / np.linalg.norm(resid))


# -- corpus and pairs ------------------------------------------------------------------

@dataclass
class Example:
    """One noisy/clean training or test item (waveforms plus spectrograms)."""

    utt_seed: int
    noise_seed: int
    snr_db: float
    clean: Waveform
    mixture: Waveform

    def spectrograms(self, cfg: StftConfig) -> tuple[ComplexSpectrogram, ComplexSpectrogram]:
        return stft(self.mixture, cfg), stft(self.clean, cfg)


def _fit_peak(clean: Waveform, mix: Waveform) -> tuple[Waveform, Waveform]:
    # keep the mixture inside the ingestion peak; the clean part shares the gain
    m = float(np.max(np.abs(mix.samples)))
    if m <= INGEST_PEAK:
        return clean, mix
    g = INGEST_PEAK / m
    return Waveform(clean.samples * g, clean.sample_rate), Waveform(mix.samples * g, mix.sample_rate)


def make_example(utt_seed: int, noise_seed: int, snr_db: float, duration: float) -> Example:
    clean = synth_utterance(utt_seed, duration)
    noise = synth_noise(noise_seed, len(clean))
    clean, mix = _fit_peak(clean, make_mixture(clean, noise, snr_db))
    return Example(utt_seed, noise_seed, float(snr_db), clean, mix)


def make_corpus(seed: int, count: int, durations=(1.0, 2.0), snr_range=SNR_RANGE) -> list[Example]:
    """``count`` examples with utterance/noise seeds derived from ``seed`` and
    SNRs drawn uniformly from ``snr_range``."""
    lo, hi = snr_range
    if lo > hi:
        raise DataError("snr_range low must not exceed high")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    out = []
    for i in range(count):
        dur = float(np.round(rng.uniform(*durations), 3))
        snr = float(rng.uniform(lo, hi))
        out.append(make_example(seed * 100_003 + i, seed * 100_003 + i + 50_000, snr, dur))
    return out


@dataclass
class Pair:
    pair_id: int
    user: Example
    attacker_seed: int
    y_user: ComplexSpectrogram
    s_user: ComplexSpectrogram
    s_attacker: ComplexSpectrogram
    n_samples: int


@dataclass
class PairSet:
    pairs: list
    seed: int
    cfg: StftConfig = field(default_factory=StftConfig)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def manifest(self) -> dict:
        return {
            "format": "seattack-pairs/1",
            "seed": self.seed,
            "stft": asdict(self.cfg),
            "pairs": [{"pair": p.pair_id, "user_seed": p.user.utt_seed, "noise_seed": p.user.noise_seed,
                       "snr_db": p.user.snr_db, "attacker_seed": p.attacker_seed,
                       "n_samples": p.n_samples, "frames": p.y_user.shape[1]} for p in self.pairs],
        }


def build_pairs(utterances: list[Example], count: int = 100, seed: int = 0, cfg: StftConfig | None = None,
                max_samples: int | None = None) -> PairSet:
    """Pair each user mixture with a different clean utterance as the target,
    cropping both to the shorter signal (and to ``max_samples`` if given)."""
    cfg = cfg or StftConfig()
    if len(utterances) < 2:
        raise DataError("need at least two utterances to form pairs")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA7]))
    pairs = []
    for i in range(count):
        u, v = rng.choice(len(utterances), size=2, replace=False)
        user, other = utterances[int(u)], utterances[int(v)]
        n = min(len(user.clean), len(other.clean))
        if max_samples is not None:
            n = min(n, int(max_samples))
        y = stft(Waveform(user.mixture.samples[:n]), cfg)
        s = stft(Waveform(user.clean.samples[:n]), cfg)
        a = stft(Waveform(other.clean.samples[:n]), cfg)
        pairs.append(Pair(i, user, other.utt_seed, y, s, a, n))
    return PairSet(pairs, seed, cfg)


def save_manifest(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- training ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256            # frames per step
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    snr_range: tuple = SNR_RANGE
    n_utterances: int = 32
    t_groups: int = 8                # diffusion: distinct t values per batch
    clip_norm: float = 1.0           # global gradient-norm clip (inf disables)
    optimizer: str = "adam"          # "adam" (momentum = beta1) or "sgd" (heavy-ball momentum)

    def __post_init__(self):
        if self.snr_range[0] > self.snr_range[1]:
            raise ValueError("snr_range low must not exceed high")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class TrainResult:
    params: NetParams
    loss_trace: list
    init_loss: float
    final_loss: float


def _frame_pool(dataset, cfg: StftConfig):
    ys, ss = [], []
    for ex in dataset:
        y, s = ex.spectrograms(cfg) if isinstance(ex, Example) else ex
        ys.append(getattr(y, "bins", y))
        ss.append(getattr(s, "bins", s))
    return np.concatenate(ys, axis=1), np.concatenate(ss, axis=1)


def _sgd(params: NetParams, loss_fn, batches, cfg: TrainConfig) -> list:
    """Momentum SGD on the trainable arrays; ``loss_fn(weights, batch)`` is taped."""
    names = params.trainable()
    vel = {k: np.zeros_like(params[k]) for k in names}
    sq = {k: np.zeros_like(params[k]) for k in names}
    trace = []
    step = 0
    for batch in batches:
        value, tape = ad.forward(lambda *ws: loss_fn(dict(zip(names, ws)), batch),
                                 *[params[k] for k in names])
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite training loss at step {step}", trace)
        grads = ad.backward(tape)
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient at step {step}", trace)
        shrink = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        for k, g in zip(names, grads):
            g = shrink * g
            if cfg.optimizer == "adam":
                vel[k] = cfg.momentum * vel[k] + (1.0 - cfg.momentum) * g
                sq[k] = ADAM_BETA2 * sq[k] + (1.0 - ADAM_BETA2) * g * g
                m_hat = vel[k] / (1.0 - cfg.momentum ** (step + 1))
                v_hat = sq[k] / (1.0 - ADAM_BETA2 ** (step + 1))
                params.arrays[k] = params.arrays[k] - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            else:
                vel[k] = cfg.momentum * vel[k] - cfg.lr * g
                params.arrays[k] = params.arrays[k] + vel[k]
        trace.append(float(value))
        step += 1
    return trace


def _batches(rng, n_frames: int, cfg: TrainConfig):
    steps = max(1, n_frames // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = rng.permutation(n_frames)
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            if idx.size == 0:
                idx = order
            yield idx


def regression_loss(params: PredictiveParams, y: np.ndarray, s: np.ndarray, weights=None, ref: float = 1.0):
    """Mean per-bin |S_hat - S|^2 divided by the constant ``ref`` (L_reg up to scale)."""
    yd, sd = DualTensor.from_complex(y), DualTensor.from_complex(s)
    op = direct_map if params.variant == "direct" else crm_apply
    out = op(params, yd, weights)
    return ad.affine(ad.sum_abs2(out - sd), 1.0 / (y.size * ref))


def pool_power(y: np.ndarray) -> float:
    """Mean per-bin |Y|^2 of a frame pool; makes the training losses independent
    of the overall spectrogram scale."""
    p = float(np.mean(np.abs(y) ** 2))
    if not p > 0:
        raise DataError("training mixtures are silent")
    return p


def train_predictive(dataset, variant: str, cfg: TrainConfig, stft_cfg: StftConfig | None = None,
                     params: PredictiveParams | None = None) -> TrainResult:
    stft_cfg = stft_cfg or StftConfig()
    if not dataset:
        raise DataError("empty training set")
    y, s = _frame_pool(dataset, stft_cfg)
    if params is None:
        params = init_predictive(variant, stft_cfg.n_bins, cfg.seed, fit_input_scale([y]))
    else:
        params = params.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A]))
    ref = pool_power(y)
    init = float(regression_loss(params, y, s, ref=ref))

    def loss_fn(w, idx):
        return regression_loss(params, y[:, idx], s[:, idx], w, ref)

    trace = _sgd(params, loss_fn, _batches(rng, y.shape[1], cfg), cfg)
    final = float(regression_loss(params, y, s, ref=ref))
    return TrainResult(params, trace, init, final)


def dsm_loss(params: ScoreParams, groups, weights=None):
    """Mean over groups of ||sigma(t) s(x_t, Y, t) + z||^2 per bin, where each
    group is (Y, S, t, z) and x_t = mean_t(S, Y) + sigma(t) z."""
    sde = params.sde
    total = None
    count = 0
    for y, s, t, z in groups:
        sig = marginal_std(t, sde)
        x = marginal_mean(s, y, t, sde) + sig * z
        xd, yd, zd = (DualTensor.from_complex(a) for a in (x, y, z))
        cond = score_condition(params, yd, weights)
        r = score_from_condition(params, xd, yd, cond, t, weights).scale(sig) + zd
        term = ad.sum_abs2(r)
        total = term if total is None else ad.add(total, term)
        count += y.size
    return ad.affine(total, 1.0 / count)


def _dsm_groups(rng, y, s, idx, cfg: TrainConfig, sde: SdeConfig):
    out = []
    for part in np.array_split(idx, cfg.t_groups):
        if part.size == 0:
            continue
        t = float(rng.uniform(T_MIN, sde.T))
        shape = (y.shape[0], part.size)
        z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
        out.append((y[:, part], s[:, part], t, z))
    return out


def train_score(dataset, cfg: TrainConfig, sde: SdeConfig | None = None,
                stft_cfg: StftConfig | None = None) -> TrainResult:
    sde = sde or SdeConfig()
    stft_cfg = stft_cfg or StftConfig()
    if not dataset:
        raise DataError("empty training set")
    y, s = _frame_pool(dataset, stft_cfg)
    params = init_score(stft_cfg.n_bins, cfg.seed, fit_input_scale([y]), sde)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD5]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7]))
    eval_idx = eval_rng.permutation(y.shape[1])[: min(y.shape[1], 4 * cfg.batch_size)]
    eval_groups = _dsm_groups(eval_rng, y, s, eval_idx, cfg, sde)
    init = float(dsm_loss(params, eval_groups))

    def batches():
        for idx in _batches(rng, y.shape[1], cfg):
            yield _dsm_groups(rng, y, s, idx, cfg, sde)

    trace = _sgd(params, lambda w, g: dsm_loss(params, g, w), batches(), cfg)
    final = float(dsm_loss(params, eval_groups))
    return TrainResult(params, trace, init, final)
