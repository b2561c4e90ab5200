"""Command-line harness: train, attack, ablate, listen-export, report.

Settings come from an optional INI file (one section per command, flat
``key = value`` lines) overlaid by command-line flags.  Every command writes its
fully resolved config as ``resolved_config.ini`` next to its outputs.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

from .attack import AttackConfig, AttackError, export_wavs, load_result, run_attack, save_result
from .data import DataError, TrainConfig, TrainingDiverged, build_pairs, make_corpus, \
    train_predictive, train_score
from .metrics import MetricRow, ablation_grid, emit_report, read_report, row_from_result, rows_from_json, \
    rows_to_json, summarize, to_csv
from .models import ModelError, SdeConfig, load_params, make_se, save_params, stft_config_from_bins
from .spectral import AudioError, StftConfig

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# -- settings ----------------------------------------------------------------------------

def _float_or_inf(s) -> float:
    s = str(s).strip().lower()
    return math.inf if s in ("inf", "+inf", "infinity") else float(s)


def _lam(s):
    s = str(s).strip().lower()
    return None if s in ("none", "off") else float(s)


def _list(conv):
    def parse(s):
        return [conv(v) for v in str(s).split(",") if v.strip()]
    return parse


# name -> (type converter, default, help)
_COMMON = {
    "seed": (int, 0, "RNG seed"),
    "out": (str, None, "output directory"),
}
_TRAIN = {
    "variant": (str, None, "direct | crm | diffusion"),
    "epochs": (int, 30, "training epochs"),
    "batch_size": (int, 256, "frames per optimizer step"),
    "lr": (float, 1e-3, "learning rate"),
    "momentum": (float, 0.9, "Adam beta1, or the heavy-ball momentum with --optimizer sgd"),
    "optimizer": (str, "adam", "adam | sgd"),
    "n_utterances": (int, 32, "synthetic training utterances"),
    "t_groups": (int, 8, "diffusion: distinct t values per batch"),
    "clip_norm": (_float_or_inf, 1.0, "global gradient-norm clip (inf disables)"),
    "snr_low": (float, -2.5, "lowest mixing SNR (dB)"),
    "snr_high": (float, 17.5, "highest mixing SNR (dB)"),
    "data_seed": (int, 1, "seed of the training corpus"),
    "gamma": (float, 1.5, "diffusion: OUVE stiffness"),
    "sigma_min": (float, 0.05, "diffusion: sigma_min"),
    "sigma_max": (float, 0.5, "diffusion: sigma_max"),
    "n_steps": (int, 25, "diffusion: reverse steps N"),
}
_PAIRS = {
    "pairs": (int, 20, "number of (user, attacker) pairs"),
    "pair_seed": (int, 2, "seed of the evaluation corpus and pairing"),
    "pool": (int, 24, "utterances in the evaluation corpus"),
    "duration": (float, 1.0, "evaluation utterance length (s)"),
    "max_samples": (int, 0, "crop pairs to this many samples (0 = no crop)"),
}
_ATTACK = {
    "model": (str, None, "parameter container stem (<stem>.json + <stem>.bin)"),
    "K": (int, 150, "attack iterations"),
    "eta": (float, 0.1, "step size"),
    "attack_momentum": (float, 0.4, "attack momentum"),
    "lam": (_lam, 20.0, "tolerance lambda in dB ('none' disables the gate)"),
    "epsilon": (_float_or_inf, 10.0, "l2 budget ('inf' disables projection)"),
    "mode": (str, "fixed", "fixed | stochastic (diffusion noise path)"),
    "n_steps": (int, 0, "diffusion: reverse steps N (0 = model's own)"),
    "export": (int, 1, "write the five WAVs per pair (1/0)"),
}
_ABLATE = {
    "models": (_list(str), None, "comma list of name=stem model entries"),
    "lambdas": (_list(_lam), [0.0, 10.0, 20.0, 40.0], "comma list of lambda values"),
    "epsilons": (_list(_float_or_inf), [10.0], "comma list of epsilon values"),
    "modes": (_list(str), ["fixed", "stochastic"], "diffusion sampling modes"),
    "steps": (_list(int), [], "diffusion N values (each becomes a model '<name>-N<n>')"),
    "K": (int, 150, "attack iterations"),
    "eta": (float, 0.1, "step size"),
    "attack_momentum": (float, 0.4, "attack momentum"),
}
_EXPORT = {"result": (str, None, "attack result JSON")}
_REPORT = {
    "input": (str, None, "report CSV or JSON"),
    "format": (str, "csv", "csv | json"),
    "output": (str, None, "destination file (default: stdout)"),
    "summary": (int, 0, "print per-group medians instead of rows (1/0)"),
}

COMMANDS = {
    "train": {**_COMMON, **_TRAIN},
    "attack": {**_COMMON, **_PAIRS, **_ATTACK},
    "ablate": {**_COMMON, **_PAIRS, **_ABLATE},
    "listen-export": {"out": _COMMON["out"], **_EXPORT},
    "report": dict(_REPORT),
}
REQUIRED = {
    "train": ("variant", "out"), "attack": ("model", "out"), "ablate": ("models", "out"),
    "listen-export": ("result", "out"), "report": ("input",),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seattack", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd, spec in COMMANDS.items():
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", help=f"INI file; keys of its [{cmd}] section match the flags below")
        for name, (_, default, text) in spec.items():
            shown = "inf" if default == math.inf else default
            p.add_argument(_flag(name), dest=name, default=None, help=f"{text} (default: {shown})")
    return ap


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file section, then flags."""
    spec = COMMANDS[command]
    raw = {}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
        if cp.has_section(command):
            for k, v in cp.items(command):
                if k not in spec:
                    raise UsageError(f"unknown key {k!r} in [{command}] of {path}")
                raw[k] = v
    for k in spec:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    out = {}
    for k, (conv, default, _) in spec.items():
        if k in raw:
            try:
                out[k] = conv(raw[k])
            except ValueError as e:
                raise UsageError(f"bad value for {k}: {raw[k]!r}") from e
        else:
            out[k] = default
    for k in REQUIRED[command]:
        if out[k] in (None, []):
            raise UsageError(f"{command}: missing required setting {_flag(k)}")
    return out


def _ini_value(v) -> str:
    if isinstance(v, list):
        return ",".join(_ini_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(v) if isinstance(v, float) else str(v)


def write_resolved(command: str, settings: dict, out_dir: Path) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp[command] = {k: _ini_value(settings[k]) for k in sorted(settings)}
    buf = io.StringIO()
    cp.write(buf)
    path = out_dir / "resolved_config.ini"
    path.write_text(buf.getvalue())
    return path


# -- commands ----------------------------------------------------------------------------

def cmd_train(s: dict) -> int:
    variant = s["variant"]
    if variant not in ("direct", "crm", "diffusion"):
        raise UsageError(f"unknown variant {variant!r} (expected direct, crm or diffusion)")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("train", s, out)
    cfg = TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], momentum=s["momentum"],
                      optimizer=s["optimizer"], seed=s["seed"], snr_range=(s["snr_low"], s["snr_high"]),
                      n_utterances=s["n_utterances"], t_groups=s["t_groups"], clip_norm=s["clip_norm"])
    stft_cfg = StftConfig()
    corpus = make_corpus(s["data_seed"], cfg.n_utterances, snr_range=cfg.snr_range)
    if variant == "diffusion":
        sde = SdeConfig(gamma=s["gamma"], sigma_min=s["sigma_min"], sigma_max=s["sigma_max"], N=s["n_steps"])
        res = train_score(corpus, cfg, sde, stft_cfg)
    else:
        res = train_predictive(corpus, variant, cfg, stft_cfg)
    save_params(out / "model", res.params, {"variant": variant, "init_loss": res.init_loss,
                                            "final_loss": res.final_loss})
    (out / "train_log.json").write_text(json.dumps({"loss_trace": [float(v) for v in res.loss_trace],
                                                    "init_loss": res.init_loss,
                                                    "final_loss": res.final_loss}, indent=2) + "\n")
    return EXIT_OK


def _load_se(stem: str, n_steps: int = 0):
    stem = Path(stem)
    stem = stem.with_suffix("") if stem.suffix in (".json", ".bin") else stem
    if not stem.with_suffix(".json").is_file() or not stem.with_suffix(".bin").is_file():
        raise FileNotFoundError(f"model parameters not found at {stem}.json/.bin")
    params = load_params(stem)
    sde = None
    if params.variant == "score":
        sde = params.sde or SdeConfig()
        if n_steps:
            sde = SdeConfig(sde.gamma, sde.sigma_min, sde.sigma_max, sde.T, n_steps)
    return make_se(params, sde), stft_config_from_bins(params.n_bins)


def _pairs(s: dict, stft_cfg: StftConfig):
    if s["pairs"] < 0:
        raise UsageError("pairs must be >= 0")
    if s["pairs"] == 0:
        return []
    corpus = make_corpus(s["pair_seed"], s["pool"], durations=(s["duration"], s["duration"]))
    return list(build_pairs(corpus, s["pairs"], s["pair_seed"], stft_cfg, s["max_samples"] or None))


def _attack_config(s: dict, lam, eps, mode) -> AttackConfig:
    return AttackConfig(K=s["K"], eta=s["eta"], momentum=s["attack_momentum"], lam=lam, epsilon=eps,
                        mode=mode, seed=s["seed"])


def cmd_attack(s: dict) -> int:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("attack", s, out)
    se, stft_cfg = _load_se(s["model"], s["n_steps"])
    cfg = _attack_config(s, s["lam"], s["epsilon"], s["mode"])
    pairs = _pairs(s, stft_cfg)
    rows = []
    for p in pairs:
        res = run_attack(se, p.y_user, p.s_attacker, cfg)
        stem = f"pair_{p.pair_id:03d}"
        save_result(res, out / f"{stem}.json", {"pair": p.pair_id, "n_samples": p.n_samples,
                                                "stft": asdict(stft_cfg)})
        if s["export"]:
            export_wavs(res, out / "wav", stem, p.n_samples)
        rows.append(row_from_result(p.pair_id, se.family, res, p.s_attacker))
    emit_report(sorted(rows, key=MetricRow.sort_key), "csv", out / "report.csv")
    return EXIT_OK


def _safe(key: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in key)


def cmd_ablate(s: dict) -> int:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("ablate", s, out)
    models, stft_cfg = {}, None
    for entry in s["models"]:
        if "=" not in entry:
            raise UsageError(f"model entry {entry!r} must look like name=stem")
        name, stem = (x.strip() for x in entry.split("=", 1))
        se, cfg = _load_se(stem)
        if stft_cfg is not None and cfg != stft_cfg:
            raise UsageError("all models in one grid must share the STFT layout")
        stft_cfg = cfg
        if se.stochastic and s["steps"]:
            for n in s["steps"]:
                models[f"{name}-N{n}"] = _load_se(stem, n)[0]
        else:
            models[name] = se
    for m in s["modes"]:
        if m not in ("fixed", "stochastic"):
            raise UsageError(f"unknown mode {m!r}")
    pairs = _pairs(s, stft_cfg)

    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    progress_path = out / "progress.json"
    done = {}
    if progress_path.is_file():
        for key in json.loads(progress_path.read_text()):
            cell = cells / f"{_safe(key)}.json"
            if cell.is_file():
                done[key] = rows_from_json([json.loads(cell.read_text())])[0]
    completed = list(done)

    def on_row(key, row):
        (cells / f"{_safe(key)}.json").write_text(json.dumps(rows_to_json([row])[0], sort_keys=True) + "\n")
        completed.append(key)
        progress_path.write_text(json.dumps(completed, indent=1) + "\n")

    def attack_fn(model, pair, lam, eps, mode):
        return run_attack(model, pair.y_user, pair.s_attacker, _attack_config(s, lam, eps, mode))

    rows = ablation_grid(models, s["lambdas"], s["epsilons"], pairs, s["modes"], attack_fn, done, on_row)
    emit_report(rows, "csv", out / "report.csv")
    emit_report(rows, "json", out / "report.json")
    (out / "summary.json").write_text(json.dumps(_json_safe(summarize(rows)), indent=2) + "\n")
    return EXIT_OK


def _json_safe(doc):
    if isinstance(doc, list):
        return [_json_safe(v) for v in doc]
    if isinstance(doc, dict):
        return {k: _json_safe(v) for k, v in doc.items()}
    if isinstance(doc, float) and math.isinf(doc):
        return "inf" if doc > 0 else "-inf"
    return doc


def cmd_listen_export(s: dict) -> int:
    path = Path(s["result"])
    if not path.is_file() or not path.with_suffix(".npz").is_file():
        raise FileNotFoundError(f"attack result not found: {path} (+ .npz)")
    doc = json.loads(path.read_text())
    extra = doc.get("extra", {})
    stft_cfg = StftConfig(**extra["stft"]) if "stft" in extra else StftConfig()
    res = load_result(path, stft_cfg)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("listen-export", s, out)
    n = int(extra.get("n_samples", 0)) or None
    export_wavs(res, out, path.stem, n)
    return EXIT_OK


def cmd_report(s: dict) -> int:
    if s["format"] not in ("csv", "json"):
        raise UsageError(f"unknown report format {s['format']!r}")
    path = Path(s["input"])
    if not path.is_file():
        raise FileNotFoundError(f"report not found: {path}")
    rows = read_report(path)
    if s["summary"]:
        text = json.dumps(_json_safe(summarize(rows)), indent=2) + "\n"
        if s["output"]:
            Path(s["output"]).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if s["output"]:
        emit_report(rows, s["format"], s["output"])
    elif s["format"] == "csv":
        sys.stdout.write(to_csv(rows))
    else:
        sys.stdout.write(json.dumps(rows_to_json(rows), indent=2) + "\n")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "ablate": cmd_ablate,
            "listen-export": cmd_listen_export, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        settings = resolve(args.command, args)
        return HANDLERS[args.command](settings)
    except (UsageError, ModelError, DataError) as e:
        print(f"seattack: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AttackError, TrainingDiverged, FloatingPointError) as e:
        print(f"seattack: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, AudioError, configparser.Error) as e:
        print(f"seattack: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"seattack: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
