"""Acceptance suite: every criterion runs from a shipped config at its stated size and tolerance.

Each test prints one ``PASS``/``FAIL`` line.  Run just this file with

    pytest -v -s tests/test_acceptance.py
"""

import time
from pathlib import Path

import numpy as np
import pytest

from bsdeid.cli import run_experiment
from bsdeid.config import load_config
from bsdeid.processes import simulate_pdmp

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def _run(name, tmp_path, **overrides):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    cfg.out_dir = str(tmp_path / name)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    start = time.perf_counter()
    report = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    assert report.fault is None, report.fault
    return cfg, report, elapsed


def _row(report, check, metric):
    (row,) = [r for r in report.rows if r.check == check and r.metric == metric]
    return row


def _announce(capsys, number, ok, text):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {text}")


def test_criterion_1_measure_transfer(tmp_path, capsys):
    worst, total = 0.0, 0.0
    names = ("transfer-scripted", "transfer-pdmp-deterministic", "transfer-pdmp-interior", "transfer-pdmp-boundary")
    for name in names:
        cfg, report, elapsed = _run(name, tmp_path)
        assert cfg.paths == 1000
        rows = [r for r in report.rows if r.check == "transfer"]
        assert len(rows) == 4  # two test functions, compensated and raw forms
        worst = max([worst] + [r.value for r in rows])
        total += elapsed
    ok = worst <= 1e-9 and total < 60.0
    _announce(capsys, 1, ok, f"transfer sup discrepancy {worst:.3g} (<= 1e-9) over {len(names)} scenarios, "
                             f"{total:.1f}s")
    assert ok


def test_criterion_2_bracket_isometry(tmp_path, capsys):
    cfg, report, elapsed = _run("isometry-boundary", tmp_path)
    assert cfg.paths == 100_000 and cfg.benchmark.id == "pdmp-boundary"
    diff = _row(report, "isometry", "difference_mean")
    se = _row(report, "isometry", "difference_se").value
    ok = abs(diff.value) <= 3.0 * se and elapsed < 300.0
    _announce(capsys, 2, ok, f"E[I^2] - E[C] = {diff.value:.4g}, 3 SE = {3 * se:.4g}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_kernel_enumeration(tmp_path, capsys):
    cfg, report, elapsed = _run("kernel-enumeration", tmp_path, checks=("kernel",))
    cases = _row(report, "kernel", "cases").value
    mism = _row(report, "kernel", "mismatches").value
    # 1-3 atoms, at most 4 marks in total, quarter masses with atom totals <= 1, W in {-1, 0, 1}
    ok = mism == 0 and cases == 152_115 and elapsed < 10.0
    _announce(capsys, 3, ok, f"{int(cases)} cases, {int(mism)} mismatches, {elapsed:.1f}s")
    assert ok


def test_criterion_4_z_identification(tmp_path, capsys):
    cfg, report, elapsed = _run("z-heat-quadratic", tmp_path)
    assert (cfg.paths, cfg.steps, cfg.basis_degree) == (100_000, 50, 3)
    z = _row(report, "z", "z_rel_error").value
    ok = z <= 0.05 and elapsed < 600.0
    _announce(capsys, 4, ok, f"z_rel_error {z:.4f} (<= 0.05), {elapsed:.1f}s")
    assert ok


def test_criterion_5_u_identification(tmp_path, capsys):
    cfg_i, report_i, t_i = _run("u-interior", tmp_path)
    cfg_b, report_b, t_b = _run("u-boundary", tmp_path)
    assert cfg_i.paths == cfg_b.paths == 100_000
    nuc = _row(report_i, "u-continuous", "h_nuc_rel").value
    nud = _row(report_b, "u-atoms", "h_nud_rel").value
    ok = nuc <= 0.05 and nud <= 0.05 and t_i < 600.0 and t_b < 600.0
    _announce(capsys, 5, ok, f"interior h_nuc_rel {nuc:.4f}, boundary post-fit h_nud_rel {nud:.4f} (<= 0.05), "
                             f"{t_i:.0f}s + {t_b:.0f}s")
    assert ok


def test_criterion_6_martingale_null(tmp_path, capsys):
    parts, ok = [], True
    for name in ("martingale-pdmp-deterministic", "martingale-pdmp-interior", "martingale-pdmp-boundary"):
        _, report, _ = _run(name, tmp_path)
        sup = _row(report, "martingale", "oracle_H_sup")
        mean = _row(report, "martingale", "lsmc_H_mean")
        se = _row(report, "martingale", "lsmc_H_se").value
        good = sup.value <= 1e-9 and (abs(mean.value) <= 3.29 * se if se > 0 else mean.value == 0.0)
        ok &= good and sup.passed and mean.passed
        parts.append(f"{name.split('-')[-1]}: sup {sup.value:.2g}, mean/SE {mean.value / se if se else 0.0:+.2f}")
    _, report, _ = _run("violating-h", tmp_path)
    sup = _row(report, "martingale", "oracle_H_sup")
    mean = _row(report, "martingale", "lsmc_H_mean")
    control_fails = sup.passed is False and mean.passed is False and report.exit_code != 0
    ok &= control_fails
    parts.append(f"violating control fails both: {control_fails}")
    _announce(capsys, 6, ok, "; ".join(parts))
    assert ok


def test_criterion_7_classification(tmp_path, capsys):
    cfg, report, elapsed = _run("classification-deterministic", tmp_path)
    sc = simulate_pdmp(cfg.model, cfg.horizon, cfg.seed)
    atoms = sc.measure.atoms()
    rows = sc.compensator.realize(sc.path)
    one_atom = len(atoms) == 1 and atoms[0][2] == "predictable" and abs(atoms[0][0] - 1.0) <= 1e-12
    mass_one = len(rows) == 1 and rows[0][3] == 1.0 and abs(rows[0][0] - 1.0) <= 1e-12
    p_star = sc.p_star.terminal
    ok = one_atom and mass_one and p_star == 1.0 and _row(report, "classification", "J_equals_K").passed \
        and elapsed < 1.0
    _announce(capsys, 7, ok, f"atoms {[(round(t, 12), k) for t, _, k in atoms]}, compensator mass "
                             f"{[float(r[3]) for r in rows]}, p*_T = {p_star:g}, {elapsed:.2f}s")
    assert ok


def test_criterion_8_orthogonality(tmp_path, capsys):
    cfg, report, _ = _run("orthogonality-heat", tmp_path)
    assert cfg.paths == 100_000 and cfg.benchmark.id == "heat-quadratic"
    mean = _row(report, "orthogonality", "covariation_mean")
    se = _row(report, "orthogonality", "covariation_se").value
    ok = se > 0 and abs(mean.value) <= 3.29 * se
    _announce(capsys, 8, ok, f"covariation mean {mean.value:.3g}, 3.29 SE = {3.29 * se:.3g}")
    assert ok


def test_criterion_9_determinism(tmp_path, capsys):
    name = "martingale-pdmp-interior"
    _run(name, tmp_path / "a")
    _run(name, tmp_path / "b")
    a = (tmp_path / "a" / name / "report.csv").read_bytes()
    b = (tmp_path / "b" / name / "report.csv").read_bytes()
    same = [p.name for p in (tmp_path / "a" / name).glob("*.csv")
            if p.read_bytes() == (tmp_path / "b" / name / p.name).read_bytes()]
    ok = a == b and len(a) > 0
    _announce(capsys, 9, ok, f"{name}: report.csv byte-identical across two runs "
                             f"(identical CSVs: {', '.join(sorted(same))})")
    assert ok
    assert np.all([p.read_bytes() == (tmp_path / "b" / name / p.name).read_bytes()
                   for p in (tmp_path / "a" / name).glob("*.tsv")])
