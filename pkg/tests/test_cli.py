import json
from pathlib import Path

import pytest

from lesionlab import cli
from lesionlab.cli import (DependencyError, ExperimentConfig, ProvenanceError, fmt_value, main, summary_csv,
                           summary_row)

GOLDEN = Path(__file__).parent / "golden"
SMALL = {"dataset": {"n_per_category": 4}, "train": {"epochs": 1}, "scorer": {"steps": 5}, "k_max": 3,
         "categories": ["circle", "ring"], "control": {"n_trials": 2}, "max_len": 4}


@pytest.mark.parametrize("value,text", [
    (2.2, "2.20"), (99.994, "99.99"), (100.0, "1.00e2"), (8820.0, "8.82e3"), (9996.0, "1.00e4"),
    (123456.0, "1.23e5"), (None, "NaN"), (float("nan"), "NaN"), (-3.5, "-3.50"),
])
def test_value_format(value, text):
    assert fmt_value(value) == text


def test_golden_paper_row():
    text = summary_csv([summary_row("dog", 5, 2.20, 8820.0, 30.35, None)])
    assert text.encode() == (GOLDEN / "summary_table1.csv").read_bytes()


def test_percent_change_sign():
    row = summary_row("x", 3, 1.0, 1.0, 40.0, 30.0)
    assert row[4:] == ["1", "40.00", "30.00", "-25%"]
    assert summary_row("x", None, 1.0, 2.0, 10.0, 12.0)[1] == "NaN"


def _write_cfg(tmp_path, extra=None):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, **(extra or {})}))
    return p


def test_config_hash_and_overrides(tmp_path):
    p = _write_cfg(tmp_path)
    a = ExperimentConfig.load(p, out=str(tmp_path / "x"))
    b = ExperimentConfig.load(p, out=str(tmp_path / "y"))
    assert a.config_hash() == b.config_hash()  # output location is not part of the identity
    assert ExperimentConfig.load(p, seed=3).config_hash() != a.config_hash()
    assert ExperimentConfig.load(p, ppl_mode="self").data["ppl_mode"] == "self_trace"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    with pytest.raises(ValueError):
        ExperimentConfig.load(bad)


def test_missing_stage_is_a_dependency_error(tmp_path, capsys):
    p = _write_cfg(tmp_path)
    cfg = ExperimentConfig.load(p, out=str(tmp_path / "runs"))
    with pytest.raises(DependencyError, match="dataset.json"):
        cli.cmd_train(cfg)
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "runs")]) == 2
    assert "missing artifact" in capsys.readouterr().err


def test_pipeline_rerun_is_byte_identical(tmp_path):
    p = _write_cfg(tmp_path)
    roots = []
    for name in ("a", "b"):
        assert main(["all", "--config", str(p), "--out", str(tmp_path / name)]) == 0
        roots.append(ExperimentConfig.load(p, out=str(tmp_path / name)).root)
    files = sorted(f.relative_to(roots[0]) for f in roots[0].rglob("*") if f.is_file())
    assert Path("summary.csv") in files and Path("circle/control.csv") in files
    for rel in files:
        if rel.name == "run.log":
            continue
        assert (roots[0] / rel).read_bytes() == (roots[1] / rel).read_bytes(), rel
    rows = (roots[0] / "summary.csv").read_text().splitlines()
    assert rows[0] == ",".join(cli.SUMMARY_HEADER) and len(rows) == 1 + 2


def test_tampering_and_config_change_detected(tmp_path):
    p = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    assert main(["gen", "--config", str(p), "--out", out]) == 0
    cfg = ExperimentConfig.load(p, out=out)
    assert main(["train", "--config", str(p), "--out", out]) == 0
    (cfg.root / "model.arrays").write_bytes(b"x")
    with pytest.raises(ProvenanceError):
        cli.cmd_profile(cfg)
    rec = json.loads((cfg.root / "dataset.json").read_text())
    rec["config_hash"] = "0" * 64
    (cfg.root / "dataset.json").write_text(json.dumps(rec))
    with pytest.raises(ProvenanceError):
        cli.cmd_train(cfg)


def test_single_category_and_unknown_category(tmp_path):
    p = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    assert main(["gen", "--config", str(p), "--out", out]) == 0
    assert main(["profile", "--config", str(p), "--out", out, "--category", "dog"]) == 2


def test_locked_run_directory(tmp_path):
    p = _write_cfg(tmp_path)
    cfg = ExperimentConfig.load(p, out=str(tmp_path / "runs"))
    cfg.root.mkdir(parents=True)
    (cfg.root / ".lock").write_text("")
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "runs")]) == 2
