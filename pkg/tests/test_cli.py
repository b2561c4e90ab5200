import json
import subprocess
import sys

import pytest

from seattack.attack import EXPORT_NAMES
from seattack.cli import main
from seattack.metrics import COLUMNS

SMALL_PAIRS = ["--pairs", "2", "--pool", "4", "--max-samples", "2048"]


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    for variant in ("direct", "diffusion"):
        assert main(["train", "--variant", variant, "--seed", "7", "--epochs", "1", "--n-utterances", "3",
                     "--out", str(root / variant)]) == 0
    return root


def test_train_is_reproducible(trained, tmp_path):
    assert main(["train", "--variant", "direct", "--seed", "7", "--epochs", "1", "--n-utterances", "3",
                 "--out", str(tmp_path)]) == 0
    for name in ("model.bin", "model.json", "train_log.json"):
        assert (tmp_path / name).read_bytes() == (trained / "direct" / name).read_bytes()
    assert "variant = direct" in (tmp_path / "resolved_config.ini").read_text()


def test_diffusion_records_sigma_max(tmp_path):
    assert main(["train", "--variant", "diffusion", "--sigma-max", "0.7", "--epochs", "1", "--n-utterances", "2",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "model.json").read_text())["sde"]["sigma_max"] == 0.7


def test_usage_and_io_exit_codes(tmp_path, trained):
    assert main(["train", "--variant", "unet", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--variant", "direct"]) == 2
    assert main(["bogus"]) == 2
    assert main(["attack", "--model", str(tmp_path / "nope"), "--out", str(tmp_path / "a")]) == 4
    assert main(["attack", "--model", str(trained / "direct" / "model"), "--epsilon", "abc",
                 "--out", str(tmp_path / "a")]) == 2
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nvariant = direct\nbogus_key = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 2
    assert main(["report", "--input", str(tmp_path / "missing.csv")]) == 4


def test_config_file_and_flag_precedence(tmp_path, trained):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[attack]\nmodel = {trained / 'direct' / 'model'}\nK = 3\nepsilon = 5\n")
    out = tmp_path / "a"
    assert main(["attack", "--config", str(cfg), "--epsilon", "inf", "--export", "0", *SMALL_PAIRS,
                 "--out", str(out)]) == 0
    resolved = (out / "resolved_config.ini").read_text()
    assert "epsilon = inf" in resolved and "K = 3" in resolved
    doc = json.loads((out / "pair_000.json").read_text())
    assert doc["config"]["epsilon"] == "inf" and doc["config"]["K"] == 3


def test_attack_rerun_is_identical_and_exports(tmp_path, trained):
    args = ["attack", "--model", str(trained / "direct" / "model"), "--mode", "fixed", "--seed", "13",
            "--K", "4", *SMALL_PAIRS]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop("resolved_config.ini"), b.pop("resolved_config.ini")
    assert a == b
    assert (tmp_path / "a" / "report.csv").read_text().splitlines()[0] == ",".join(COLUMNS)
    wavs = sorted(p.name for p in (tmp_path / "a" / "wav").iterdir())
    assert wavs == sorted(f"pair_{i:03d}_{n}.wav" for i in range(2) for n in EXPORT_NAMES)
    # re-export from the saved result reproduces the attack-time WAVs
    assert main(["listen-export", "--result", str(tmp_path / "a" / "pair_001.json"),
                 "--out", str(tmp_path / "e")]) == 0
    for n in EXPORT_NAMES:
        name = f"pair_001_{n}.wav"
        assert (tmp_path / "e" / name).read_bytes() == (tmp_path / "a" / "wav" / name).read_bytes()
    assert main(["listen-export", "--result", str(tmp_path / "nope.json"), "--out", str(tmp_path / "f")]) == 4


def test_ablate_resume_matches_full_run(tmp_path, trained):
    args = ["ablate", "--models", f"direct={trained / 'direct' / 'model'},diff={trained / 'diffusion' / 'model'}",
            "--lambdas", "0,40", "--epsilons", "10,inf", "--steps", "3,5", "--K", "2", *SMALL_PAIRS]
    full = tmp_path / "full"
    assert main(args + ["--out", str(full)]) == 0
    keys = json.loads((full / "progress.json").read_text())
    # direct: 2 lambdas x 2 eps x 2 pairs; diffusion: 2 N values x 2 modes x the same 8 cells
    assert len(keys) == 8 + 32
    part = tmp_path / "part"
    assert main(args + ["--out", str(part)]) == 0
    kept = keys[:13]
    (part / "progress.json").write_text(json.dumps(kept))
    for p in (part / "cells").iterdir():
        if p.name not in {f"{''.join(c if c.isalnum() or c in '-_.' else '_' for c in k)}.json" for k in kept}:
            p.unlink()
    (part / "report.csv").unlink()
    assert main(args + ["--out", str(part)]) == 0
    for name in ("report.csv", "report.json", "summary.json"):
        assert (part / name).read_bytes() == (full / name).read_bytes()
    rows = (full / "report.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"direct", "diff-N3", "diff-N5"}


def test_report_command(tmp_path, trained, capsys):
    out = tmp_path / "a"
    assert main(["attack", "--model", str(trained / "direct" / "model"), "--K", "2", "--export", "0",
                 *SMALL_PAIRS, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", "--input", str(out / "report.csv"), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc) == 2 and list(doc[0]) == list(COLUMNS)
    assert main(["report", "--input", str(out / "report.csv"), "--summary", "1",
                 "--output", str(tmp_path / "s.json")]) == 0
    assert json.loads((tmp_path / "s.json").read_text())[0]["pairs"] == 2
    assert main(["report", "--input", str(out / "report.csv"), "--format", "xml"]) == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "seattack.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "attack", "ablate", "listen-export", "report"):
        assert cmd in r.stdout
    r = subprocess.run([sys.executable, "-m", "seattack.cli", "train", "--variant", "x", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "unknown variant" in r.stderr
