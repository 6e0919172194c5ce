import csv
import io
from pathlib import Path

import pytest

from bsdeid.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _rows(out):
    return list(csv.DictReader(io.StringIO((out / "report.csv").read_text())))


def _run(tmp_path, config, *extra):
    out = tmp_path / Path(config).stem
    code = main(["--config", str(CONFIGS / config), "--out", str(out), *extra])
    return code, out


def test_brownian_linear_passes(tmp_path, capsys):
    code, out = _run(tmp_path, "brownian-linear.yaml")
    assert code == 0
    rows = {r["metric"]: r for r in _rows(out)}
    assert rows["z_rel_error"]["status"] == "pass"
    assert float(rows["z_rel_error"]["value"]) <= 0.05
    assert "all checks passed (exit 0)" in capsys.readouterr().out
    for name in ("scenario_path.tsv", "scenario_measure.tsv", "scenario_compensator.tsv",
                 "scenario_manifest.json", "solution_steps.csv", "solution_atoms.csv", "summary.txt"):
        assert (out / name).is_file()
    for png in ("fig_paths.png", "fig_solution.png", "fig_martingale.png"):
        assert (out / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_violating_control_fails(tmp_path):
    code, out = _run(tmp_path, "violating-h.yaml", "--paths", "3000")
    assert code == 1
    status = {r["metric"]: r["status"] for r in _rows(out) if r["check"] == "martingale" and r["status"]}
    assert status == {"oracle_H_sup": "fail", "lsmc_H_mean": "fail"}
    assert "FAILED (exit 1)" in (out / "summary.txt").read_text()


def test_report_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    args = ["--config", str(CONFIGS / "martingale-pdmp-interior.yaml"), "--paths", "500"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert main(args + ["--out", str(b), "--seed", "1"]) == 0
    assert (a / "report.csv").read_bytes() != (b / "report.csv").read_bytes()


def test_check_subset(tmp_path):
    code, out = _run(tmp_path, "jumpdiff-clock.yaml", "--paths", "200", "--check", "transfer,classification")
    assert code == 0
    checks = {r["check"] for r in _rows(out)}
    assert checks == {"solve", "transfer", "classification"}


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {benchmark: brownian-linear}\nrun: {paths: 0, seed: 1}\n")
    assert main(["--config", str(bad)]) == 2
    assert "run.paths" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["--config", str(tmp_path / "absent.yaml")]) == 2


@pytest.mark.parametrize("extra", [["--check", "telepathy"], ["--paths", "1"], ["--seed", "-3"]])
def test_bad_overrides_exit_2(tmp_path, extra):
    assert _run(tmp_path, "brownian-linear.yaml", *extra)[0] == 2


def test_module_fault_is_categorised(tmp_path):
    cfg = tmp_path / "stiff.yaml"
    cfg.write_text("""
name: stiff
model: {jumpdiff: {x0: 0.0, sigma: 1.0}}
bsde: {g: identity, driver: {by: 30.0}}
run: {paths: 50, steps: 2, seed: 1}
checks: [z]
output: {figures: false}
""")
    out = tmp_path / "stiff"
    assert main(["--config", str(cfg), "--out", str(out)]) == 2
    assert "FAULT fixed-point" in (out / "summary.txt").read_text()
    assert (out / "report.csv").read_text().startswith("check,metric,value,tolerance,status")
