from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from presto import cli
from presto.instances import fix_b


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def fix_b_model(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps(cli.model_dict(fix_b())))
    return path


def test_solve_model_file(tmp_path, fix_b_model):
    out = tmp_path / "out"
    assert cli.main(["solve", "--model", str(fix_b_model), "--out", str(out)]) == 0
    rows = (out / "solution.csv").read_text().splitlines()
    assert rows[1].split(",")[:4] == ["0", "0", "0", "0.5"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["Y0"] == 0.5


def test_malformed_model_writes_nothing(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert cli.main(["solve", "--model", str(bad), "--out", str(out)]) == 1
    assert not out.exists()


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fixture": "FIX-A", "colour": "blue"}))
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_unknown_driver_and_no_contraction(tmp_path):
    assert cli.main(["solve", "--fixture", "FIX-B", "--driver", "name=nope", "--out", str(tmp_path / "a")]) == 1
    assert cli.main(["solve", "--fixture", "FIX-B", "--driver", "name=discount,rho=2",
                     "--out", str(tmp_path / "b")]) == 2
    assert not (tmp_path / "b").exists()


def test_oracle_compare_seed_range(tmp_path):
    out = tmp_path / "oc"
    assert cli.main(["oracle-compare", "--seeds", "1..50", "--out", str(out)]) == 0
    rep = json.loads((out / "oracle_compare.json").read_text())
    assert rep["all_within_tolerance"] and len(rep["instances"]) == 50


def test_stop_and_verify(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["stop", "--fixture", "FIX-D", "--out", str(out)]) == 0
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["tau_tilde"]["value_per_atom"] == [1.0]
    assert diag["tau_tilde"]["tau"]["instants"] == ["1-", "1"]
    assert cli.main(["verify", "--fixture", "FIX-C", "--out", str(out)]) == 0
    assert json.loads((out / "verify.json").read_text())["ok"]


def test_sweep_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["sweep", "--seeds", "3..5", "--out", str(out)]) == 0
    files_a = _tree_bytes(a)
    assert files_a and files_a == _tree_bytes(b)
    assert len([k for k in files_a if k.endswith("report.json")]) == 12


def test_presto_seed_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("PRESTO_SEED", "7")
    out = tmp_path / "g"
    assert cli.main(["solve", "--generate", "seed=1,stages=2", "--out", str(out)]) == 0
    monkeypatch.delenv("PRESTO_SEED")
    ref = tmp_path / "r"
    assert cli.main(["solve", "--generate", "seed=7,stages=2", "--out", str(ref)]) == 0
    assert _tree_bytes(out) == _tree_bytes(ref)


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "presto", "solve", "--fixture", "FIX-A", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "solution.csv").exists()
