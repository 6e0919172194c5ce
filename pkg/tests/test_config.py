from pathlib import Path

import pytest

from bsdeid.config import CHECKS, DEFAULT_TOLERANCES, ConfigError, load_config, parse_config
from bsdeid.processes import JumpDiffusionModel, PDMPModel

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))

MINIMAL_PDMP = """
model:
  pdmp:
    flow: {intercept: 1.0}
    rate: 1.0
    jump: {uniform: [0.1, 0.9]}
    x0: 0.5
run: {paths: 100, seed: 1}
"""


def _errors(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value.errors


def test_minimal_pdmp_gets_defaults():
    cfg = parse_config(MINIMAL_PDMP)
    assert isinstance(cfg.model, PDMPModel)
    assert cfg.basis_degree == 3 and cfg.basis_cells == 1 and cfg.steps == 50
    assert cfg.tolerances == DEFAULT_TOLERANCES
    assert cfg.checks == CHECKS and cfg.control == "none" and cfg.holdout
    assert cfg.horizon == 1.0
    assert cfg.benchmark.problem.clock == "compensator" and not cfg.benchmark.problem.with_brownian
    assert cfg.benchmark.oracle() is None


def test_benchmark_config_with_horizon():
    cfg = parse_config("model: {benchmark: heat-quadratic}\nrun: {paths: 10, seed: 0, horizon: 2.0}\n"
                       "checks: z, orthogonality\n")
    assert cfg.horizon == 2.0 and cfg.checks == ("z", "orthogonality")
    assert cfg.benchmark.oracle().v(2.0, 3.0) == pytest.approx(9.0)


def test_explicit_jumpdiff():
    cfg = parse_config("""
model:
  jumpdiff:
    x0: 0.0
    sigma: 1.0
    jumps: {rate: 2.0, marks: {normal: [0.0, 1.0]}}
    atoms: [{time: 0.5, marks: {discrete: {values: [-1, 1], probs: [0.5, 0.5]}}, clock_jump: 1.0}]
bsde: {g: square, driver: {by: 0.1}}
run: {paths: 10, seed: 0}
""")
    m = cfg.model
    assert isinstance(m, JumpDiffusionModel)
    assert m.rate == 2.0 and m.atom_times == (0.5,)
    assert float(m.gamma(0.5, 0.0, 1.0)) == 0.0 and float(m.gamma(0.4, 0.0, 1.0)) == 1.0
    assert cfg.benchmark.problem.driver.by == 0.1


def test_paths_must_be_at_least_two():
    errs = _errors("model: {benchmark: brownian-linear}\nrun: {paths: 0, seed: 1}\n")
    assert any("run.paths" in e for e in errs)


def test_two_models_are_rejected():
    errs = _errors("model: {benchmark: brownian-linear, pdmp: {}}\nrun: {paths: 10, seed: 1}\n")
    assert any("exactly one model" in e for e in errs)


def test_every_violation_is_collected():
    errs = _errors("""
model: {benchmark: nope}
run: {paths: 1.5, seed: -1, colour: red}
checks: [martingale, telepathy]
control: maybe
""")
    joined = "\n".join(errs)
    for needle in ("unknown key run.colour", "run.paths", "run.seed", "telepathy", "control", "nope"):
        assert needle in joined
    assert len(errs) >= 6


def test_missing_required_keys():
    errs = _errors("name: x\n")
    assert "missing key model" in errs and "missing key run" in errs


def test_malformed_yaml():
    errs = _errors("model: [unclosed\n")
    assert errs[0].startswith("malformed YAML")


def test_benchmark_problem_cannot_be_overridden():
    errs = _errors("model: {benchmark: brownian-linear}\nbsde: {g: square}\nrun: {paths: 10, seed: 1}\n")
    assert any("cannot override" in e for e in errs)


def test_integro_oracle_needs_a_pdmp():
    errs = _errors("model: {jumpdiff: {x0: 0.0, sigma: 1.0}}\nbsde: {oracle: integro}\nrun: {paths: 10, seed: 1}\n")
    assert any("integro needs a PDMP" in e for e in errs)


def test_bad_kernel():
    errs = _errors(MINIMAL_PDMP.replace("{uniform: [0.1, 0.9]}", "{cauchy: 1}"))
    assert any("unknown kernel" in e for e in errs)


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.name == path.stem
    assert cfg.out_dir == f"out/{path.stem}"
