"""Attack metrics, ablation grids and CSV/JSON report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LOG_EPS = 1e-8

COLUMNS = ("pair", "model", "lambda_db", "epsilon", "mode", "loss_final",
           "target_lsd_db", "pert_snr_db", "impact_lsd_db")

# JSON report shape: an array of flat objects with exactly the CSV columns.
# Infinite values (epsilon = inf, SNR of a zero perturbation) are written as "inf".
_NUM_OR_INF = {"anyOf": [{"type": "number"}, {"enum": ["inf"]}]}
REPORT_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": list(COLUMNS),
        "properties": {
            "pair": {"type": "integer", "minimum": 0},
            "model": {"type": "string"},
            "lambda_db": {"anyOf": [{"type": "number"}, {"type": "null"}]},
            "epsilon": _NUM_OR_INF,
            "mode": {"type": "string"},
            "loss_final": {"type": "number", "minimum": 0},
            "target_lsd_db": {"type": "number", "minimum": 0},
            "pert_snr_db": _NUM_OR_INF,
            "impact_lsd_db": {"type": "number", "minimum": 0},
        },
    },
}


def _grid(x) -> np.ndarray:
    return np.asarray(getattr(x, "bins", x))


def perturbation_snr(y_user, delta) -> float:
    """20 log10(||Y||_2 / ||delta||_2) over all bins; +inf for a zero perturbation."""
    d = float(np.linalg.norm(_grid(delta)))
    if d == 0.0:
        return math.inf
    return 20.0 * math.log10(float(np.linalg.norm(_grid(y_user))) / d)


def spectral_log_distance(a, b) -> float:
    """Mean over bins of |20 log10((|a| + eps0) / (|b| + eps0))|, eps0 = 1e-8."""
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(20.0 * np.log10((np.abs(a) + LOG_EPS) / (np.abs(b) + LOG_EPS)))))


@dataclass(frozen=True)
class MetricRow:
    pair: int
    model: str
    lambda_db: float | None
    epsilon: float
    mode: str
    loss_final: float
    target_lsd_db: float
    pert_snr_db: float
    impact_lsd_db: float

    def __post_init__(self):
        for k in ("loss_final", "target_lsd_db", "impact_lsd_db"):
            if not math.isfinite(getattr(self, k)):
                raise ValueError(f"{k} must be finite")

    def sort_key(self) -> tuple:
        lam = -math.inf if self.lambda_db is None else self.lambda_db
        return (self.model, self.mode, lam, self.epsilon, self.pair)


def row_from_result(pair_id: int, model: str, result, s_attacker) -> MetricRow:
    cfg = result.config
    return MetricRow(
        pair=int(pair_id), model=model, lambda_db=cfg.lam, epsilon=float(cfg.epsilon), mode=cfg.mode,
        loss_final=float(result.loss_final),
        target_lsd_db=spectral_log_distance(result.s_hat_attacked, s_attacker),
        pert_snr_db=perturbation_snr(result.y_user, result.delta_final),
        impact_lsd_db=spectral_log_distance(result.attacked, result.y_user),
    )


def ablation_grid(models: dict, lambdas, epsilons, pairs, modes, attack_fn, done: dict | None = None,
                  on_row=None) -> list[MetricRow]:
    """One row per (model, lambda, epsilon, mode, pair), in a fixed sort order.

    ``models`` maps a name to an SE operator; ``attack_fn(model, pair, lam, eps,
    mode)`` returns an AttackResult.  Cells already in ``done`` (key -> row) are
    reused, which is how interrupted grids resume.  Predictive models ignore
    ``modes`` and run once per cell in mode "fixed".
    """
    done = dict(done or {})
    rows = []
    for name in sorted(models):
        model = models[name]
        cell_modes = sorted(modes) if getattr(model, "stochastic", False) else ["fixed"]
        for mode in cell_modes:
            for lam in lambdas:
                for eps in epsilons:
                    for pair in pairs:
                        key = grid_key(name, lam, eps, mode, pair.pair_id)
                        if key not in done:
                            res = attack_fn(model, pair, lam, eps, mode)
                            done[key] = row_from_result(pair.pair_id, name, res, pair.s_attacker)
                            if on_row is not None:
                                on_row(key, done[key])
                        rows.append(done[key])
    return sorted(rows, key=MetricRow.sort_key)


def grid_key(model: str, lam, eps, mode: str, pair_id: int) -> str:
    return f"{model}|{_fmt(lam)}|{_fmt(eps)}|{mode}|{pair_id}"


# -- emission -----------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _parse_num(s: str):
    if s == "":
        return None
    return float(s)


def rows_to_json(rows) -> list[dict]:
    return [{k: _json_value(v) for k, v in asdict(r).items()} for r in rows]


def rows_from_json(doc) -> list[MetricRow]:
    out = []
    for d in doc:
        vals = {k: (float(v) if isinstance(v, str) and k not in ("model", "mode") else v) for k, v in d.items()}
        vals["pair"] = int(vals["pair"])
        out.append(MetricRow(**vals))
    return out


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def from_csv(text: str) -> list[MetricRow]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    out = []
    for rec in reader:
        d = dict(zip(COLUMNS, rec))
        out.append(MetricRow(
            pair=int(d["pair"]), model=d["model"], lambda_db=_parse_num(d["lambda_db"]),
            epsilon=float(d["epsilon"]), mode=d["mode"], loss_final=float(d["loss_final"]),
            target_lsd_db=float(d["target_lsd_db"]), pert_snr_db=float(d["pert_snr_db"]),
            impact_lsd_db=float(d["impact_lsd_db"]),
        ))
    return out


def validate_report(doc) -> None:
    import jsonschema
    jsonschema.validate(doc, REPORT_SCHEMA)


def emit_report(rows, fmt: str, path: str | Path) -> Path:
    """Write ``rows`` as CSV or JSON (stable column order and row order)."""
    path = Path(path)
    if fmt == "csv":
        text = to_csv(rows)
    elif fmt == "json":
        text = json.dumps(rows_to_json(rows), indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def read_report(path: str | Path) -> list[MetricRow]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return rows_from_json(json.loads(text))
    return from_csv(text)


def summarize(rows, by=("model", "mode", "lambda_db", "epsilon")) -> list[dict]:
    """Median loss / SNR / distances per group (trend assertions use medians)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in by), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple((-math.inf if v is None else v) if not isinstance(v, str) else v
                                                  for v in k)):
        rs = groups[key]
        out.append({**dict(zip(by, key)), "pairs": len(rs),
                    "loss_final": float(np.median([r.loss_final for r in rs])),
                    "pert_snr_db": float(np.median([r.pert_snr_db for r in rs])),
                    "target_lsd_db": float(np.median([r.target_lsd_db for r in rs])),
                    "impact_lsd_db": float(np.median([r.impact_lsd_db for r in rs]))})
    return out
