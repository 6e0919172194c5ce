"""Command-line experiment runner: simulate, solve, identify, report.

    bsdeid --config configs/heat-quadratic.yaml --out runs/hq
    bsdeid --config configs/pdmp-boundary.yaml --paths 20000 --check martingale,u-atoms

Exit status is 0 when every enabled check passes, 1 when a check fails and
2 when the config is invalid or a module raises (the fault category is
written to ``summary.txt``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .bsde import FixedPointError, RegressionError, solve_bsde_lsmc, solve_bsde_pdmp
from .config import CHECKS, ConfigError, load_config
from .identify import (
    classify_ensemble,
    compute_H,
    continuous_martingale,
    decompose_H_on_K,
    enumerate_kernel_cases,
    extract_remainder,
    identify_Z,
    isometry_test,
    martingale_null_test,
    orthogonality_test,
    shift_on_K,
    violating_field,
)
from .measures import IntegrabilityError, PredictableField, fmt
from .processes import (
    SimulationFault,
    simulate_jumpdiff_ensemble,
    simulate_pdmp_ensemble,
    verify_measure_transfer,
)

FAULTS = (
    (SimulationFault, "simulation"),
    (RegressionError, "regression"),
    (FixedPointError, "fixed-point"),
    (IntegrabilityError, "integrability"),
)


def _phi_square(t, x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0, x * x, 0.0)


def _phi_abs(t, x):
    return np.minimum(np.abs(np.asarray(x, dtype=float)), 1.0)


TRANSFER_PHIS = (("x^2 1{|x|<=1}", _phi_square), ("|x| min 1", _phi_abs))


def _isometry_field(t, x, e):
    e = np.asarray(e, dtype=float)
    return np.cos(2.0 * np.asarray(x, dtype=float)) * e + np.asarray(t, dtype=float) * e * e


@dataclass
class Row:
    check: str
    metric: str
    value: float
    tolerance: object = None
    passed: object = None

    def csv(self):
        tol = "" if self.tolerance is None else fmt(self.tolerance)
        ok = "" if self.passed is None else ("pass" if self.passed else "fail")
        return f"{self.check},{self.metric},{fmt(self.value)},{tol},{ok}"


@dataclass
class Report:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    fault: str | None = None

    def add(self, check, metric, value, tolerance=None, passed=None):
        self.rows.append(Row(check, metric, float(value), tolerance, None if passed is None else bool(passed)))

    def note(self, text):
        self.notes.append(text)

    @property
    def failed(self):
        return [r for r in self.rows if r.passed is False]

    def csv(self):
        return "check,metric,value,tolerance,status\n" + "".join(r.csv() + "\n" for r in self.rows)

    @property
    def exit_code(self):
        if self.fault is not None:
            return 2
        return 1 if self.failed else 0


def _k_level(t, x):
    return 0.5 + np.asarray(t, dtype=float) + 0.0 * np.asarray(x, dtype=float)


class Runner:
    def __init__(self, cfg, checks=None):
        self.cfg = cfg
        self.checks = tuple(checks) if checks else cfg.checks
        self.report = Report()
        self.out = Path(cfg.out_dir)
        self.bm = cfg.benchmark
        self.oracle = None
        self.solution = None

    # -- pipeline ---------------------------------------------------------

    def simulate(self, first=0):
        cfg = self.cfg
        sim = simulate_pdmp_ensemble if self.bm.is_pdmp else simulate_jumpdiff_ensemble
        return sim(self.bm.model, self.bm.horizon, cfg.seed, cfg.paths, cfg.steps, first=first)

    def run(self):
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        self.train = self.simulate()
        needs_holdout = cfg.holdout and any(c in self.checks for c in ("martingale", "u-continuous", "u-atoms",
                                                                        "z"))
        self.test = self.simulate(first=cfg.paths) if needs_holdout else self.train
        self.write_scenario()
        self.oracle = self.bm.oracle()
        self.solve()
        for name in CHECKS:
            if name in self.checks:
                getattr(self, "check_" + name.replace("-", "_"))()
        if cfg.figures:
            self.figures()

    def write_scenario(self):
        sc = self.train.scenario(0)
        (self.out / "scenario_path.tsv").write_text(sc.path.to_csv().replace(",", "\t"))
        (self.out / "scenario_measure.tsv").write_text(sc.measure.to_tsv())
        (self.out / "scenario_compensator.tsv").write_text(sc.compensator.to_tsv(sc.path))
        manifest = sc.manifest()
        manifest.update({"config": self.cfg.name, "paths": self.cfg.paths, "steps": self.cfg.steps})
        (self.out / "scenario_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def solve(self):
        cfg = self.cfg
        if self.bm.is_pdmp:
            sol = solve_bsde_pdmp(self.bm.problem, self.train, cfg.basis_degree, cfg.basis_cells)
        else:
            sol = solve_bsde_lsmc(self.bm.problem, self.train, cfg.basis_degree, cfg.basis_cells)
        self.solution = sol
        (self.out / "solution_steps.csv").write_text(sol.steps_csv())
        (self.out / "solution_atoms.csv").write_text(sol.atoms_csv(cfg.atom_paths))
        self.report.add("solve", "y0_mean", float(np.mean(sol.Y[:, 0])))
        if self.oracle is not None:
            t = self.train.base_nodes
            V = self.oracle.v(np.broadcast_to(t, sol.Y.shape), self.train.base_values)
            num = np.mean((sol.Y - V) ** 2, axis=0)
            den = np.mean(V ** 2, axis=0)
            rel = np.sqrt(num / np.where(den > 0, den, 1.0))
            self.report.add("solve", "y_rel_error_max", float(np.max(rel)))
            self.oracle_mean = V.mean(axis=0)
        self.U = sol.U_field()
        if self.cfg.control == "violating-h":
            self.U = violating_field(self.U)
            self.report.note("positive control: U carries a constant shift and a bonus on realised atoms")

    # -- checks -----------------------------------------------------------

    def _skip(self, name, why):
        self.report.note(f"{name}: not applicable ({why})")

    def check_transfer(self):
        tol = self.cfg.tolerances["pathwise"]
        for label, phi in TRANSFER_PHIS:
            r = verify_measure_transfer(phi, self.train)
            for kind in ("compensated", "raw"):
                v = float(np.max(r[kind]))
                self.report.add("transfer", f"{kind} sup [{label}]", v, tol, v <= tol)

    def check_classification(self):
        c = classify_ensemble(self.train)
        self.report.add("classification", "predictable_jumps", c.predictable_jumps)
        self.report.add("classification", "J_atoms", c.j_atoms)
        self.report.add("classification", "K_atoms", c.k_atoms)
        self.report.add("classification", "max_atom_mass_error", c.max_mass_error)
        self.report.add("classification", "J_equals_K", float(c.passed), 1.0, c.passed)

    def check_isometry(self):
        W = PredictableField(_isometry_field, name="isometry-W")
        r = isometry_test(W, self.train.compensator, self.train.batch, self.cfg.tolerances["isometry_band"])
        self.report.add("isometry", "mean_square_integral", r.mean_square)
        self.report.add("isometry", "mean_bracket", r.mean_bracket)
        self.report.add("isometry", "difference_se", r.test.se)
        self.report.add("isometry", "difference_mean", r.test.mean, self.cfg.tolerances["isometry_band"],
                        r.test.passed)

    def check_kernel(self):
        r = enumerate_kernel_cases()
        self.report.add("kernel", "cases", r.cases)
        self.report.add("kernel", "mismatches", r.mismatches, 0, r.passed)

    def check_martingale(self):
        if self.oracle is None:
            return self._skip("martingale", "no oracle")
        tol = self.cfg.tolerances
        exact = shift_on_K(self.oracle.increment_field(self.bm.model), _k_level)
        if self.cfg.control == "violating-h":
            exact = violating_field(exact)
        H0 = compute_H(exact, self.oracle, self.test)
        m0 = martingale_null_test(H0, self.test)
        self.report.add("martingale", "oracle_H_sup", m0.test.sup, tol["pathwise"], m0.test.sup <= tol["pathwise"])
        H = compute_H(self.U, self.oracle, self.test)
        m = martingale_null_test(H, self.test)
        self.martingale_terminal = m.terminal
        self.report.add("martingale", "lsmc_H_sup", m.test.sup)
        self.report.add("martingale", "lsmc_H_se", m.test.se)
        ok = abs(m.test.mean) <= tol["band"] * m.test.se if m.test.se > 0 else m.test.mean == 0.0
        self.report.add("martingale", "lsmc_H_mean", m.test.mean, tol["band"], ok)

    def check_z(self):
        if self.oracle is None or self.solution.Z is None:
            return self._skip("z", "no oracle or no continuous martingale part")
        try:
            z = identify_Z(self.solution.z_on(self.test), self.oracle, self.test)
        except ValueError as exc:
            return self._skip("z", str(exc))
        tol = self.cfg.tolerances["relative"]
        self.report.add("z", "z_rel_error", z, tol, z <= tol)

    def _decomposition(self):
        if not hasattr(self, "_kd"):
            H = compute_H(self.U, self.oracle, self.test)
            self._kd = decompose_H_on_K(H, self.test, self.U)
        return self._kd

    def check_u_continuous(self):
        if self.oracle is None or self.test.compensator.ac is None:
            return self._skip("u-continuous", "no oracle or no absolutely continuous compensator")
        kd = self._decomposition()
        tol = self.cfg.tolerances["relative"]
        self.report.add("u-continuous", "h_nuc_l2", kd.h_nuc_l2)
        self.report.add("u-continuous", "h_nuc_rel", kd.h_nuc_rel, tol, kd.h_nuc_rel <= tol)

    def check_u_atoms(self):
        if self.oracle is None or not self.test.batch.nu_atom.any():
            return self._skip("u-atoms", "no oracle or no predictable atoms")
        kd = self._decomposition()
        tol = self.cfg.tolerances["relative"]
        for key in list(kd.l_fit)[:3]:
            self.report.add("u-atoms", f"l_fit [{key}]", kd.l_fit[key])
        self.report.add("u-atoms", "h_nud_residual", kd.h_nud_residual)
        self.report.add("u-atoms", "h_nud_rel", kd.h_nud_rel, tol, kd.h_nud_rel <= tol)

    def check_orthogonality(self):
        if self.oracle is None:
            return self._skip("orthogonality", "no oracle")
        rem = extract_remainder(self.oracle, self.train)
        N = continuous_martingale(self.train)
        t = orthogonality_test(rem, N, self.train)
        self.report.add("orthogonality", "covariation_se", t.se)
        self.report.add("orthogonality", "covariation_mean", t.mean, self.cfg.tolerances["band"], t.passed)
        self.report.note("orthogonality is tested against the driving Brownian motion only")

    # -- output -----------------------------------------------------------

    def figures(self):
        plotting.plot_paths(self.train, self.out / "fig_paths.png")
        plotting.plot_solution(self.solution, getattr(self, "oracle_mean", None), self.out / "fig_solution.png")
        if hasattr(self, "martingale_terminal"):
            plotting.plot_martingale(self.martingale_terminal, self.out / "fig_martingale.png")
        if self.oracle is not None:
            b = self.train.batch
            has = b.has_mu & (np.arange(b.shape[0])[:, None] < max(1, self.cfg.atom_paths))
            if has.any():
                inc = self.oracle.increment_field(self.bm.model)
                t, xl, e, xp = b.t[has], b.xl[has], b.mu_mark[has], b.x[has]
                plotting.plot_u_atoms(t, self.U.at_atoms(t, xl, e, xp), inc(t, xl, e), self.out / "fig_u_atoms.png")


def summary_text(cfg, report, checks):
    lines = [f"experiment: {cfg.name if cfg else '?'}"]
    if cfg is not None:
        lines += [f"model: {cfg.benchmark.id}", f"paths: {cfg.paths}  steps: {cfg.steps}  seed: {cfg.seed}",
                  f"basis: degree {cfg.basis_degree}, cells {cfg.basis_cells}", f"control: {cfg.control}",
                  f"checks: {', '.join(checks)}"]
    lines.append("")
    if report.fault is not None:
        lines.append(f"FAULT {report.fault}")
    for r in report.rows:
        if r.passed is not None:
            lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.check:<15} {r.metric:<32} {fmt(r.value)}")
    for n in report.notes:
        lines.append(f"note: {n}")
    lines.append("")
    lines.append(f"result: {'all checks passed' if report.exit_code == 0 else 'FAILED'} "
                 f"(exit {report.exit_code})")
    return "\n".join(lines) + "\n"


def run_experiment(cfg, checks=None):
    """Run one configured experiment; returns the :class:`Report` (artifacts are written to disk)."""
    runner = Runner(cfg, checks)
    try:
        runner.run()
    except Exception as exc:  # every module fault ends the run with its category
        category = next((name for cls, name in FAULTS if isinstance(exc, cls)), type(exc).__name__)
        runner.report.fault = f"{category}: {exc}"
    out = runner.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(runner.report.csv())
    (out / "summary.txt").write_text(summary_text(cfg, runner.report, runner.checks))
    return runner.report


def build_parser():
    p = argparse.ArgumentParser(prog="bsdeid", description="Simulate, solve and check BSDE identification formulas.")
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--paths", type=int, help="override run.paths")
    p.add_argument("--out", help="override output.dir")
    p.add_argument("--check", help=f"comma-separated subset of: {', '.join(CHECKS)}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    errors = []
    if args.seed is not None:
        if args.seed < 0:
            errors.append("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.paths is not None:
        if args.paths < 2:
            errors.append(f"run.paths must be at least 2, got {args.paths}")
        cfg.paths = args.paths
    if args.out is not None:
        cfg.out_dir = args.out
    checks = None
    if args.check:
        checks = [c.strip() for c in args.check.split(",") if c.strip()]
        errors += [f"--check: unknown check {c!r}" for c in checks if c not in CHECKS]
    if errors:
        print("invalid arguments:\n  " + "\n  ".join(errors), file=sys.stderr)
        return 2
    report = run_experiment(cfg, checks)
    print(summary_text(cfg, report, checks or cfg.checks), end="")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
