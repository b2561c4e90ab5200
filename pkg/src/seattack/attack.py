"""Targeted white-box attack: gated momentum PGD on a complex STFT perturbation."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DualTensor, Gradient
from .models import NoisePath
from .psychoacoustics import GateMask, HearingThreshold, gate, hearing_threshold, spectral_difference
from .spectral import ComplexSpectrogram, Waveform, istft, write_wav

MODES = ("fixed", "stochastic")


class AttackError(RuntimeError):
    """Raised when the attack hits a non-finite loss or gradient."""


@dataclass(frozen=True)
class AttackConfig:
    K: int = 150
    eta: float = 0.1
    momentum: float = 0.4
    lam: float | None = 20.0      # None disables the gate (all ones)
    epsilon: float = 10.0         # math.inf disables the projection
    mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive or inf")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = "inf" if math.isinf(self.epsilon) else self.epsilon
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["epsilon"] = float(d.get("epsilon", 10.0))
        return cls(**d)


@dataclass(frozen=True)
class PerturbationState:
    delta: ComplexSpectrogram
    velocity: ComplexSpectrogram
    iter: int = 0

    @classmethod
    def zeros(cls, like: ComplexSpectrogram) -> "PerturbationState":
        z = ComplexSpectrogram.zeros_like(like)
        return cls(z, z, 0)


@dataclass
class AttackResult:
    delta_final: ComplexSpectrogram
    loss_trace: np.ndarray
    norm_trace: np.ndarray                 # ||delta||_2 after every update
    loss_final: float
    y_user: ComplexSpectrogram
    attacked: ComplexSpectrogram
    s_hat_clean: ComplexSpectrogram
    s_hat_attacked: ComplexSpectrogram
    gate_zero_always: np.ndarray           # bins whose gate was 0 at every iteration
    config: AttackConfig
    provenance: dict = field(default_factory=dict)


# -- pieces of one iteration ---------------------------------------------------------

def adv_loss(s_hat, s_attacker) -> float:
    a = np.asarray(getattr(s_hat, "bins", s_hat))
    b = np.asarray(getattr(s_attacker, "bins", s_attacker))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    r = a - b
    return float(np.sum(r.real ** 2 + r.imag ** 2))


def project_l2(delta: ComplexSpectrogram, epsilon: float) -> ComplexSpectrogram:
    """delta * min(1, epsilon / ||delta||_2); identity for infinite epsilon."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if math.isinf(epsilon):
        return delta
    n = delta.norm()
    if n <= epsilon:
        return delta
    return delta.scaled(epsilon / n)


def attack_step(state: PerturbationState, grad: Gradient | np.ndarray, mask: GateMask | np.ndarray | None,
                cfg: AttackConfig) -> PerturbationState:
    """Gate the gradient, accumulate momentum, step, project."""
    g = grad.complex if isinstance(grad, Gradient) else np.asarray(grad)
    if g.shape != state.delta.shape:
        raise ValueError(f"gradient shape {g.shape} != perturbation shape {state.delta.shape}")
    if not np.all(np.isfinite(g)):
        raise AttackError(f"non-finite gradient at iteration {state.iter}")
    phi_hat = mask.phi_hat if isinstance(mask, GateMask) else (1.0 if mask is None else np.asarray(mask))
    gated = phi_hat * g               # one real gate for both planes
    velocity = cfg.momentum * state.velocity.bins + gated
    delta = state.delta.with_bins(state.delta.bins - cfg.eta * velocity)
    delta = project_l2(delta, cfg.epsilon)
    return PerturbationState(delta, state.delta.with_bins(velocity), state.iter + 1)


def loss_and_grad(model, y_user: ComplexSpectrogram, s_attacker: ComplexSpectrogram,
                  delta: ComplexSpectrogram, path: NoisePath | None = None) -> tuple[float, Gradient]:
    """L_adv at ``delta`` and its (d/dRe, d/dIm) gradient through ``model``."""
    y = DualTensor.from_complex(y_user.bins)
    target = DualTensor.from_complex(s_attacker.bins)

    def graph(d):
        return ad.sum_abs2(model(d + y, path) - target)

    value, tape = ad.forward(graph, delta.bins)
    (grad,) = ad.backward(tape)
    return float(value), grad


def enhance(model, y: ComplexSpectrogram, path: NoisePath | None = None) -> ComplexSpectrogram:
    out = model(DualTensor.from_complex(y.bins), path)
    return y.with_bins(out.value())


# -- full loop -----------------------------------------------------------------------

def _streams(seed: int):
    """Independent RNG streams: frozen path, per-iteration paths, evaluation path."""
    frozen, fresh, held_out = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(frozen), np.random.default_rng(fresh), np.random.default_rng(held_out)


def run_attack(model, y_user: ComplexSpectrogram, s_attacker: ComplexSpectrogram, cfg: AttackConfig,
               threshold: HearingThreshold | None = None, n_steps: int | None = None) -> AttackResult:
    """Optimise delta so that model(Y_user + delta) approaches S_attacker.

    ``model`` is any SE operator from :mod:`seattack.models`.  For a diffusion
    model, mode "fixed" freezes one noise path (initial draw and increments) for
    all iterations and the final evaluation; "stochastic" draws a new path every
    iteration and evaluates the result on a separate held-out draw.
    """
    if y_user.shape != s_attacker.shape:
        raise ValueError(f"mixture {y_user.shape} and target {s_attacker.shape} differ in shape")
    if y_user.cfg != s_attacker.cfg:
        raise ValueError("mixture and target use different STFT settings")
    stochastic_model = bool(getattr(model, "stochastic", False))
    n_steps = n_steps or (model.sde.N if stochastic_model else 0)
    frozen_rng, fresh_rng, eval_rng = _streams(cfg.seed)

    def new_path(rng):
        return NoisePath.from_rng(rng, y_user.shape, n_steps, cfg.seed) if stochastic_model else None

    frozen = new_path(frozen_rng)

    if cfg.lam is not None and threshold is None:
        threshold = hearing_threshold(y_user)

    state = PerturbationState.zeros(y_user)
    losses = np.empty(cfg.K)
    norms = np.empty(cfg.K)
    zero_always = np.ones(y_user.shape, dtype=bool)
    for k in range(cfg.K):
        if cfg.lam is None:
            mask = None
            zero_always[:] = False
        else:
            mask = gate(threshold, spectral_difference(state.delta, y_user), cfg.lam)
            zero_always &= mask.phi_hat == 0.0
        path = frozen if cfg.mode == "fixed" else new_path(fresh_rng)
        loss, grad = loss_and_grad(model, y_user, s_attacker, state.delta, path)
        if not math.isfinite(loss):
            raise AttackError(f"non-finite loss at iteration {k}")
        losses[k] = loss
        state = attack_step(state, grad, mask, cfg)
        norms[k] = state.delta.norm()

    eval_path = frozen if cfg.mode == "fixed" else new_path(eval_rng)
    attacked = y_user + state.delta
    s_clean = enhance(model, y_user, eval_path)
    s_att = enhance(model, attacked, eval_path)
    return AttackResult(
        delta_final=state.delta, loss_trace=losses, norm_trace=norms,
        loss_final=adv_loss(s_att, s_attacker), y_user=y_user, attacked=attacked,
        s_hat_clean=s_clean, s_hat_attacked=s_att, gate_zero_always=zero_always, config=cfg,
        provenance={"model": getattr(model, "family", type(model).__name__), "n_steps": n_steps},
    )


# -- serialisation ---------------------------------------------------------------------

EXPORT_NAMES = ("mixture", "attacked", "enhanced_mixture", "enhanced_attacked", "perturbation")


def export_wavs(result: AttackResult, out_dir: str | Path, stem: str, n_samples: int) -> list[Path]:
    """Render the five signals of one result to ``<stem>_<name>.wav``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = (result.y_user, result.attacked, result.s_hat_clean, result.s_hat_attacked, result.delta_final)
    paths = []
    for name, spec in zip(EXPORT_NAMES, specs):
        p = out_dir / f"{stem}_{name}.wav"
        write_wav(p, istft(spec, out_len=n_samples))
        paths.append(p)
    return paths


def save_result(result: AttackResult, path: str | Path, extra: dict | None = None) -> None:
    """JSON metrics plus a sibling ``.npz`` holding the spectrogram grids."""
    path = Path(path)
    doc = {
        "config": result.config.to_dict(),
        "provenance": result.provenance,
        "loss_final": result.loss_final,
        "loss_trace": [float(v) for v in result.loss_trace],
        "norm_trace": [float(v) for v in result.norm_trace],
        "extra": extra or {},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_npz(path.with_suffix(".npz"), delta=result.delta_final.bins, y_user=result.y_user.bins,
               s_hat_clean=result.s_hat_clean.bins, s_hat_attacked=result.s_hat_attacked.bins,
               gate_zero_always=result.gate_zero_always)


def _write_npz(path: Path, **arrays) -> None:
    # np.savez stamps the current time into the archive; fix it so reruns are byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_result(path: str | Path, stft_cfg) -> AttackResult:
    path = Path(path)
    doc = json.loads(path.read_text())
    with np.load(path.with_suffix(".npz")) as z:
        grids = {k: z[k] for k in z.files}
    mk = lambda a: ComplexSpectrogram(a, stft_cfg)
    y, d = mk(grids["y_user"]), mk(grids["delta"])
    return AttackResult(
        delta_final=d, loss_trace=np.array(doc["loss_trace"]), norm_trace=np.array(doc["norm_trace"]),
        loss_final=doc["loss_final"], y_user=y, attacked=y + d, s_hat_clean=mk(grids["s_hat_clean"]),
        s_hat_attacked=mk(grids["s_hat_attacked"]), gate_zero_always=grids["gate_zero_always"],
        config=AttackConfig.from_dict(doc["config"]), provenance=doc["provenance"],
    )
