"""Toy speech-enhancement operators and the OUVE reverse-SDE sampler.

Three families are provided, all differentiable with respect to the noisy
spectrogram through :mod:`seattack.autodiff`:

* direct mapping  ``S_hat = skip * Y + net(Y)``
* complex ratio mask ``S_hat = 2 tanh(logits(Y)) (*) Y``
* score-based diffusion, integrating the reverse SDE with Euler-Maruyama.

The networks are per-frame MLPs over stacked (re, im) planes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DualTensor
from .spectral import ComplexSpectrogram, StftConfig

HIDDEN = 128
TIME_EMBED = 16
SHRINK_SCALES = (0.1, 0.3, 1.0, 3.0)
VARIANTS = ("direct", "crm", "score")


class ModelError(ValueError):
    pass


# -- SDE --------------------------------------------------------------------------

@dataclass(frozen=True)
class SdeConfig:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    T: float = 1.0
    N: int = 25

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.T <= 0 or self.gamma <= 0:
            raise ValueError("T and gamma must be positive")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def time_grid(self) -> np.ndarray:
        """Start times t_i = T (1 - i/N), i = 0..N-1; each step advances by -T/N."""
        return self.T * (1.0 - np.arange(self.N) / self.N)


def diffusion_coeff(t: float, cfg: SdeConfig) -> float:
    if not 0.0 <= t <= cfg.T:
        raise ValueError(f"t={t} outside [0, {cfg.T}]")
    return cfg.sigma_min * (cfg.sigma_max / cfg.sigma_min) ** t * math.sqrt(2.0 * cfg.log_ratio)


def marginal_std(t, cfg: SdeConfig):
    """Closed-form OUVE perturbation-kernel standard deviation sigma(t)."""
    t = np.asarray(t, dtype=np.float64)
    g, lr = cfg.gamma, cfg.log_ratio
    var = cfg.sigma_min ** 2 * np.exp(-2 * g * t) * (np.exp(2 * (g + lr) * t) - 1.0) * lr / (g + lr)
    out = np.sqrt(var)
    return float(out) if out.ndim == 0 else out


def marginal_mean(s, y, t, cfg: SdeConfig):
    a = math.exp(-cfg.gamma * t)
    return a * s + (1.0 - a) * y


def _as_dual(x) -> DualTensor:
    if isinstance(x, DualTensor):
        return x
    return DualTensor.from_complex(getattr(x, "bins", x))


def _check_same(a: DualTensor, b: DualTensor, what: str):
    if a.shape != b.shape:
        raise ModelError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def drift(x, y, cfg: SdeConfig):
    """OUVE forward drift gamma (Y - x)."""
    wrap = isinstance(x, ComplexSpectrogram)
    xd, yd = _as_dual(x), _as_dual(y)
    _check_same(xd, yd, "drift")
    out = (yd - xd).scale(cfg.gamma)
    return x.with_bins(out.value()) if wrap else out


@dataclass(frozen=True)
class NoisePath:
    """Frozen Wiener path: one initial draw plus one increment per reverse step.

    Draws are circular complex Gaussians with E|z|^2 = 1 per bin.
    """

    seed: int | None
    init: np.ndarray
    increments: np.ndarray

    @classmethod
    def draw(cls, seed: int, shape: tuple[int, int], n_steps: int) -> "NoisePath":
        rng = np.random.default_rng(seed)
        return cls.from_rng(rng, shape, n_steps, seed)

    @classmethod
    def from_rng(cls, rng: np.random.Generator, shape, n_steps: int, seed=None) -> "NoisePath":
        z = rng.standard_normal((n_steps + 1, 2) + tuple(shape)) / math.sqrt(2.0)
        c = z[:, 0] + 1j * z[:, 1]
        return cls(seed, c[0], c[1:])

    @classmethod
    def zeros(cls, shape, n_steps: int) -> "NoisePath":
        return cls(None, np.zeros(shape, complex), np.zeros((n_steps,) + tuple(shape), complex))

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]


def initial_state(y, cfg: SdeConfig, path: NoisePath):
    """x_T = Y + sigma(T) z with z the path's initial draw."""
    wrap = isinstance(y, ComplexSpectrogram)
    yd = _as_dual(y)
    if path.init.shape != yd.shape:
        raise ModelError(f"noise path shape {path.init.shape} != spectrogram shape {yd.shape}")
    x = yd + DualTensor.from_complex(path.init).scale(marginal_std(cfg.T, cfg))
    return y.with_bins(x.value()) if wrap else x


# -- parameters -------------------------------------------------------------------

@dataclass
class NetParams:
    """Weights of one toy network.  ``arrays`` maps names to float64 arrays;
    ``fixed`` lists names that are normalisation constants, not trained."""

    variant: str
    arrays: dict
    fixed: tuple = ("in_scale", "out_scale")
    sde: SdeConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")
        for k, v in self.arrays.items():
            v = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ModelError(f"parameter {k!r} has non-finite entries")
            self.arrays[k] = v

    @property
    def n_bins(self) -> int:
        return self.arrays["in_scale"].shape[0]

    def trainable(self) -> list[str]:
        return [k for k in sorted(self.arrays) if k not in self.fixed]

    def __getitem__(self, k):
        return self.arrays[k]

    def copy(self) -> "NetParams":
        return type(self)(self.variant, {k: v.copy() for k, v in self.arrays.items()}, self.fixed, self.sde)


class PredictiveParams(NetParams):
    pass


class ScoreParams(NetParams):
    pass


def _glorot(rng, n_in, n_out):
    return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)


def init_predictive(variant: str, n_bins: int = 256, seed: int = 0,
                    in_scale: np.ndarray | None = None) -> PredictiveParams:
    """Randomly initialised hidden layers with a zero output layer, so the
    initial operator is the identity: skip = 1 for direct, M = 1 for crm."""
    if variant not in ("direct", "crm"):
        raise ModelError(f"predictive variant must be 'direct' or 'crm', got {variant!r}")
    rng = np.random.default_rng(seed)
    f = n_bins
    scale = np.ones(f) if in_scale is None else np.broadcast_to(np.asarray(in_scale, float), (f,)).copy()
    a = {
        "w1": _glorot(rng, 2 * f, HIDDEN), "b1": np.zeros(HIDDEN),
        "w2": _glorot(rng, HIDDEN, HIDDEN), "b2": np.zeros(HIDDEN),
        "w3": np.zeros((HIDDEN, 2 * f)), "b3": np.zeros(2 * f),
        "in_scale": scale.copy(),
    }
    if variant == "direct":
        a["skip"] = np.ones(f)
        a["out_scale"] = 1.0 / scale
    else:
        a["b3"][:f] = math.atanh(0.5)
        a["out_scale"] = np.ones(f)
    return PredictiveParams(variant, a)


def init_score(n_bins: int = 256, seed: int = 0, in_scale: np.ndarray | None = None,
               sde: SdeConfig | None = None) -> ScoreParams:
    rng = np.random.default_rng(seed)
    f = n_bins
    scale = np.ones(f) if in_scale is None else np.broadcast_to(np.asarray(in_scale, float), (f,)).copy()
    fan_in = 4 * f + TIME_EMBED
    a = {
        # first layer split by input: current state x, conditioner Y, time embedding
        "w1x": rng.standard_normal((2 * f, HIDDEN)) / math.sqrt(fan_in),
        "w1y": rng.standard_normal((2 * f, HIDDEN)) / math.sqrt(fan_in),
        "wt": rng.standard_normal((TIME_EMBED, HIDDEN)) / math.sqrt(fan_in),
        "b1": np.zeros(HIDDEN),
        "w2": _glorot(rng, HIDDEN, HIDDEN), "b2": np.zeros(HIDDEN),
        "w3": np.zeros((HIDDEN, 2 * f)), "b3": np.zeros(2 * f),
        # per-bin gains (see pointwise_gain): "sh" scales the standardised residual
        # and starts at ~1, the exact kernel score around S_hat; "yk" maps Y into
        # the clean estimate and starts at 0, exact wherever the speech is silent
        **_gain_arrays("sh", f, 1.0, 3.0, {}),
        **_gain_arrays("yk", f, 0.0, 0.0, {}),
        "in_scale": scale.copy(),
        "out_scale": 1.0 / scale,
    }
    return ScoreParams("score", a, sde=sde or SdeConfig())


def zero_like(params: NetParams) -> NetParams:
    p = params.copy()
    for k in p.arrays:
        if k not in p.fixed:
            p.arrays[k] = np.zeros_like(p.arrays[k])
    return p


def fit_input_scale(spectrograms, floor: float = 0.0) -> np.ndarray:
    """Per-frequency 1/RMS of a collection of spectrograms (constant normaliser)."""
    acc = None
    count = 0
    for s in spectrograms:
        b = getattr(s, "bins", s)
        e = np.sum(np.abs(b) ** 2, axis=1)
        acc = e if acc is None else acc + e
        count += b.shape[1]
    rms = np.sqrt(acc / count + floor ** 2)
    return 1.0 / np.maximum(rms, 1e-6)


# -- networks -----------------------------------------------------------------------

def _frames(planes: list, scale: np.ndarray):
    """Stack F x T planes into a (T, k F) feature matrix, scaled per frequency."""
    feats = ad.concat([ad.transpose(p) for p in planes], axis=1)
    return ad.affine(feats, np.tile(scale, len(planes)))


def _unframe(out, f: int) -> DualTensor:
    re = ad.transpose(ad.slice_axis(out, 1, 0, f))
    im = ad.transpose(ad.slice_axis(out, 1, f, 2 * f))
    return DualTensor(re, im)


def _mlp(feats, p):
    h = ad.tanh(ad.dense(feats, p["w1"], p["b1"]))
    h = ad.tanh(ad.dense(h, p["w2"], p["b2"]))
    return ad.dense(h, p["w3"], p["b3"])


def _scaled(d: DualTensor, scale) -> DualTensor:
    return DualTensor(ad.affine(d.re, scale[:, None]), ad.affine(d.im, scale[:, None]))


def value_of_shape(x) -> tuple:
    return np.shape(ad.value_of(x))


def _check_bins(y: DualTensor, params: NetParams):
    if y.shape[0] != params.n_bins:
        raise ModelError(f"spectrogram has {y.shape[0]} rows, model expects {params.n_bins}")


def direct_map(params, y, weights: dict | None = None):
    """Direct mapping d_theta(Y).  ``weights`` may override arrays with taped Vars."""
    if params.variant != "direct":
        raise ModelError("direct_map needs a 'direct' parameter set")
    wrap = isinstance(y, ComplexSpectrogram)
    yd = _as_dual(y)
    _check_bins(yd, params)
    p = {**params.arrays, **(weights or {})}
    f = params.n_bins
    net = _unframe(_mlp(_frames([yd.re, yd.im], p["in_scale"]), p), f)
    net = DualTensor(ad.affine(net.re, p["out_scale"][:, None]), ad.affine(net.im, p["out_scale"][:, None]))
    out = DualTensor(ad.scale_rows(yd.re, p["skip"]), ad.scale_rows(yd.im, p["skip"])) + net
    return y.with_bins(out.value()) if wrap else out


def crm_mask(params, y, weights: dict | None = None) -> DualTensor:
    yd = _as_dual(y)
    _check_bins(yd, params)
    p = {**params.arrays, **(weights or {})}
    logits = _unframe(_mlp(_frames([yd.re, yd.im], p["in_scale"]), p), params.n_bins)
    return DualTensor(ad.affine(ad.tanh(logits.re), 2.0), ad.affine(ad.tanh(logits.im), 2.0))


def crm_apply(params, y, weights: dict | None = None):
    """Complex ratio mask: M = 2 tanh(l_re) + 2j tanh(l_im), S_hat = M (*) Y."""
    if params.variant != "crm":
        raise ModelError("crm_apply needs a 'crm' parameter set")
    wrap = isinstance(y, ComplexSpectrogram)
    yd = _as_dual(y)
    out = ad.cmul(crm_mask(params, yd, weights), yd)
    return y.with_bins(out.value()) if wrap else out


def time_embedding(t: float) -> np.ndarray:
    k = np.arange(TIME_EMBED // 2)
    freqs = np.exp(k * math.log(1000.0) / max(TIME_EMBED // 2 - 1, 1))
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def score_condition(params, y, weights: dict | None = None) -> tuple:
    """The Y-only parts of the score network, shared by every reverse step:
    the Y block of the first layer and the gained mixture k(|Y|^2) (*) Y."""
    yd = _as_dual(y)
    _check_bins(yd, params)
    p = {**params.arrays, **(weights or {})}
    pre = ad.dense(_frames([yd.re, yd.im], p["in_scale"]), p["w1y"], p["b1"])
    k = pointwise_gain(p, "yk", _scaled(yd, p["in_scale"]).abs2())
    return pre, DualTensor(ad.mul(yd.re, k), ad.mul(yd.im, k))


def pointwise_gain(p: dict, prefix: str, u2, tau: float = 0.0):
    """Per-bin gain (g + tanh(sum_j w_j tanh(k_j u2) + a tau + b)) / 2 with
    per-frequency g, a, b, w_j read from ``p`` as ``<prefix>_g`` etc."""
    return ad.pointwise_gain(u2, p[prefix + "_g"], p[prefix + "_a"], p[prefix + "_b"],
                             p[prefix + "_w"], SHRINK_SCALES, tau)


def _gain_arrays(prefix: str, f: int, g: float, b: float, w: dict) -> dict:
    out = {prefix + "_g": np.full(f, g), prefix + "_a": np.zeros(f), prefix + "_b": np.full(f, b)}
    out[prefix + "_w"] = np.array([np.full(f, w.get(k, 0.0)) for k in SHRINK_SCALES])
    return out


def score_from_condition(params, x: DualTensor, y: DualTensor, cond, t: float,
                         weights: dict | None = None) -> DualTensor:
    """Score from a clean-speech estimate and a per-bin shrinkage gain.

    The body predicts S_hat = k(|Y|^2) (*) Y + out_scale * net(x, Y, emb(t)); with
    m = e^{-gamma t} S_hat + (1 - e^{-gamma t}) Y the kernel mean and
    u = (x - m) / sigma(t) the standardised residual, s = -h (*) u / sigma(t).
    ``cond`` comes from :func:`score_condition`.
    """
    p = {**params.arrays, **(weights or {})}
    sde = params.sde or SdeConfig()
    n_frames = x.shape[1]
    emb = np.tile(time_embedding(t), (n_frames, 1))
    cond_pre, y_gained = cond
    pre = ad.add(ad.add(ad.dense(_frames([x.re, x.im], p["in_scale"]), p["w1x"]),
                        ad.dense(emb, p["wt"])), cond_pre)
    h = ad.tanh(pre)
    h = ad.tanh(ad.dense(h, p["w2"], p["b2"]))
    net = _unframe(ad.dense(h, p["w3"], p["b3"]), params.n_bins)
    s_hat = y_gained + _scaled(net, p["out_scale"])
    a = math.exp(-sde.gamma * t)
    sig = marginal_std(max(t, 1e-4), sde)
    u = (x - y.scale(1.0 - a) - s_hat.scale(a)).scale(1.0 / sig)
    gain = pointwise_gain(p, "sh", u.abs2(), math.log(sig))
    return DualTensor(ad.mul(u.re, gain), ad.mul(u.im, gain)).scale(-1.0 / sig)


def score_forward(params, x, y, t: float, weights: dict | None = None):
    """Score estimate s_theta(x, Y, t) with the same F x T shape as ``x``."""
    wrap = isinstance(x, ComplexSpectrogram)
    xd, yd = _as_dual(x), _as_dual(y)
    _check_same(xd, yd, "score_forward")
    _check_bins(xd, params)
    s = score_from_condition(params, xd, yd, score_condition(params, yd, weights), t, weights)
    return x.with_bins(s.value()) if wrap else s


# -- reverse SDE --------------------------------------------------------------------

def reverse_step(params, x: DualTensor, y: DualTensor, z: DualTensor, t: float, cfg: SdeConfig,
                 cond=None) -> DualTensor:
    """One Euler-Maruyama step from t to t - T/N of
    dx = [-f(x, Y) + g(t)^2 s(x, Y, t)] dt + g(t) dw  (integrated backwards in time).

    ``cond`` is the precomputed :func:`score_condition` of ``y``; when omitted it is
    recomputed here.
    """
    dt = cfg.T / cfg.N
    g = diffusion_coeff(t, cfg)
    if cond is None:
        cond = score_condition(params, y)
    score = score_from_condition(params, x, y, cond, t)
    move = (x - y).scale(cfg.gamma * dt) + score.scale(g * g * dt)
    return x + move + z.scale(g * math.sqrt(dt))


def reverse_sde_sample(params, y, cfg: SdeConfig | None = None, mode="stochastic",
                       checkpoint: bool = True, rng: np.random.Generator | None = None):
    """Integrate the reverse SDE from x_T ~ N_C(Y, sigma(T)^2) to t = 0 in N steps.

    ``mode`` is either a :class:`NoisePath` (frozen path, deterministic) or the
    string ``"stochastic"`` (fresh draws from ``rng``).  With a Var-valued ``y``
    each step is a checkpoint region when ``checkpoint`` is true.
    """
    cfg = cfg or params.sde or SdeConfig()
    wrap = isinstance(y, ComplexSpectrogram)
    yd = _as_dual(y)
    if isinstance(mode, NoisePath):
        path = mode
        if path.n_steps != cfg.N:
            raise ModelError(f"noise path has {path.n_steps} increments, sampler needs {cfg.N}")
        if path.init.shape != yd.shape:
            raise ModelError(f"noise path shape {path.init.shape} != spectrogram shape {yd.shape}")
    elif mode == "stochastic":
        path = NoisePath.from_rng(rng if rng is not None else np.random.default_rng(), yd.shape, cfg.N)
    else:
        raise ModelError(f"unknown sampling mode {mode!r}")
    x = initial_state(yd, cfg, path)
    cond = score_condition(params, yd)
    for i, t in enumerate(cfg.time_grid()):
        z = DualTensor.from_complex(path.increments[i])

        def step(xx, yy, cc, zz, t=float(t)):
            return reverse_step(params, xx, yy, zz, t, cfg, cc)

        x = ad.checkpoint_region(step, x, yd, cond, z) if checkpoint else step(x, yd, cond, z)
    return y.with_bins(x.value()) if wrap else x


# -- SE operators used by the attack --------------------------------------------------

@dataclass
class DirectMapSE:
    params: PredictiveParams
    family: str = "direct"
    stochastic: bool = False

    def __call__(self, y: DualTensor, path: NoisePath | None = None) -> DualTensor:
        return direct_map(self.params, y)


@dataclass
class MaskSE:
    params: PredictiveParams
    family: str = "crm"
    stochastic: bool = False

    def __call__(self, y: DualTensor, path: NoisePath | None = None) -> DualTensor:
        return crm_apply(self.params, y)


@dataclass
class DiffusionSE:
    params: ScoreParams
    sde: SdeConfig = field(default_factory=SdeConfig)
    checkpoint: bool = True
    family: str = "diffusion"
    stochastic: bool = True

    def __call__(self, y: DualTensor, path: NoisePath | None = None) -> DualTensor:
        if path is None:
            raise ModelError("diffusion sampling needs an explicit noise path")
        return reverse_sde_sample(self.params, y, self.sde, path, checkpoint=self.checkpoint)


def make_se(params: NetParams, sde: SdeConfig | None = None):
    if params.variant == "direct":
        return DirectMapSE(params)
    if params.variant == "crm":
        return MaskSE(params)
    return DiffusionSE(params, sde or params.sde or SdeConfig())


# -- parameter container ---------------------------------------------------------------

def save_params(stem: str | Path, params: NetParams, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (concatenated little-endian float64 arrays) and ``<stem>.json``."""
    stem = Path(stem)
    entries, offset, chunks = [], 0, []
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "seattack-params/1",
        "variant": params.variant,
        "fixed": list(params.fixed),
        "arrays": entries,
        "sde": asdict(params.sde) if params.sde else None,
        "extra": extra or {},
    }
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load_params(stem: str | Path) -> NetParams:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    sde = SdeConfig(**manifest["sde"]) if manifest.get("sde") else None
    cls = ScoreParams if manifest["variant"] == "score" else PredictiveParams
    return cls(manifest["variant"], arrays, tuple(manifest["fixed"]), sde)


def load_manifest(stem: str | Path) -> dict:
    return json.loads(Path(stem).with_suffix(".json").read_text())


def stft_config_from_bins(n_bins: int) -> StftConfig:
    return StftConfig(fft_size=2 * (n_bins - 1))
