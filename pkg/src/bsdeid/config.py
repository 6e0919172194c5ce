"""Experiment configuration: YAML text to a validated :class:`ExperimentConfig`.

A config names exactly one forward model (a registered benchmark or an
explicit ``pdmp``/``jumpdiff`` block), a BSDE (benchmark or named built-ins),
run parameters, the checks to perform and the output location.  Validation
collects every violation before failing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from . import benchmarks
from .benchmarks import Benchmark, G_BUILTINS
from .bsde import BSDEProblem, Driver, IntegroOracle, closed_form_oracle
from .kernels import ByTime, Dirac, Discrete, Normal, Uniform
from .processes import JumpDiffusionModel, PDMPModel

CHECKS = ("transfer", "classification", "isometry", "kernel", "martingale", "z", "u-continuous", "u-atoms",
          "orthogonality")
CONTROLS = ("none", "violating-h")
CLOSED_FORMS = ("brownian-linear", "poisson-linear", "brownian-poisson", "heat-quadratic", "pdmp-deterministic",
                "pdmp-interior")

_TOP = {"name", "model", "bsde", "run", "checks", "control", "output"}
_MODEL = {"benchmark", "pdmp", "jumpdiff"}
_PDMP = {"flow", "rate", "jump", "x0"}
_FLOW = {"intercept", "slope"}
_JUMPDIFF = {"x0", "drift", "sigma", "jumps", "atoms", "script"}
_JUMPS = {"rate", "marks", "gamma"}
_ATOM = {"time", "marks", "clock_jump"}
_BSDE = {"benchmark", "g", "driver", "clock", "oracle", "with_brownian"}
_DRIVER = {"const", "by", "bz", "bu"}
_RUN = {"paths", "steps", "seed", "horizon", "basis_degree", "basis_cells", "holdout", "tolerances"}
_TOL = {"band", "isometry_band", "relative", "pathwise"}
_OUTPUT = {"dir", "figures", "atom_paths"}

DEFAULT_TOLERANCES = {"band": 3.29, "isometry_band": 3.0, "relative": 0.05, "pathwise": 1e-9}


class ConfigError(ValueError):
    """All violations found in a config, one message per entry of ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    name: str
    benchmark: Benchmark
    paths: int
    steps: int
    seed: int
    basis_degree: int = 3
    basis_cells: int = 1
    holdout: bool = True
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    checks: tuple = ()
    control: str = "none"
    out_dir: str = "out"
    figures: bool = True
    atom_paths: int = 1000

    @property
    def model(self):
        return self.benchmark.model

    @property
    def horizon(self):
        return self.benchmark.horizon


class _Collector:
    def __init__(self):
        self.errors = []

    def add(self, msg):
        self.errors.append(msg)

    def block(self, data, where, allowed, required=()):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.add(f"{where} must be a mapping")
            return {}
        for key in data:
            if key not in allowed:
                self.add(f"unknown key {where}.{key}" if where else f"unknown key {key}")
        for key in required:
            if key not in data:
                self.add(f"missing key {where}.{key}" if where else f"missing key {key}")
        return data

    def number(self, data, key, where, default=None, integer=False, lo=None):
        if key not in data:
            return default
        v = data[key]
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if integer:
            ok = ok and float(v).is_integer()
        if not ok:
            self.add(f"{where}.{key} must be {'an integer' if integer else 'a number'}")
            return default
        if lo is not None and v < lo:
            self.add(f"{where}.{key} must be >= {lo}, got {v}")
            return default
        return int(v) if integer else float(v)


# ---------------------------------------------------------------------------
# kernels and models


def _kernel(c, spec, where, target):
    """``{uniform: [lo, hi]}``, ``{normal: [mean, sd]}``, ``{to: q}``, ``{size: s}`` or ``{discrete: {...}}``."""
    if not isinstance(spec, dict) or len(spec) != 1:
        c.add(f"{where} must be a one-key mapping naming the kernel")
        return None
    (kind, arg), = spec.items()
    try:
        if kind == "uniform":
            lo, hi = arg
            return Uniform(float(lo), float(hi), target=target)
        if kind == "normal" and not target:
            m, s = arg
            return Normal(float(m), float(s))
        if kind == "to" and target:
            return Dirac(target=float(arg))
        if kind == "size" and not target:
            return Dirac(size=float(arg))
        if kind == "discrete":
            c.block(arg, f"{where}.discrete", {"values", "probs"}, ("values", "probs"))
            return Discrete(arg["values"], arg["probs"], target=target)
    except (TypeError, ValueError, KeyError) as exc:
        c.add(f"{where}.{kind}: {exc}")
        return None
    c.add(f"unknown kernel {where}.{kind}")
    return None


def _const(v):
    return lambda *args: np.full(np.broadcast(*[np.asarray(a) for a in args]).shape, v)


def _affine_flow(a, b):
    return lambda x: a + b * np.asarray(x, dtype=float)


def _off_atoms(fn, times):
    times = np.asarray(sorted(times), dtype=float)

    def gamma(t, x, e):
        t = np.asarray(t, dtype=float)
        keep = np.ones(np.shape(t), dtype=bool)
        for s in times:
            keep &= np.abs(t - s) > 1e-12
        return fn(t, x, e) * keep
    return gamma


_GAMMAS = {
    "mark": lambda t, x, e: np.asarray(e, dtype=float) + 0.0 * np.asarray(x, dtype=float),
    "state-scaled": lambda t, x, e: np.asarray(e, dtype=float) * (1.0 + 0.5 * np.tanh(x)),
}


def _pdmp_model(c, d, name):
    d = c.block(d, "model.pdmp", _PDMP, ("flow", "rate", "jump", "x0"))
    flow = c.block(d.get("flow", {}), "model.pdmp.flow", _FLOW)
    a = c.number(flow, "intercept", "model.pdmp.flow", 0.0)
    b = c.number(flow, "slope", "model.pdmp.flow", 0.0)
    rate = c.number(d, "rate", "model.pdmp", 0.0, lo=0.0)
    x0 = c.number(d, "x0", "model.pdmp", 0.0)
    if x0 is not None and not 0.0 <= x0 <= 1.0:
        c.add("model.pdmp.x0 must lie in [0, 1]")
    Q = _kernel(c, d.get("jump"), "model.pdmp.jump", target=True) if "jump" in d else None
    if c.errors or Q is None:
        return None
    return PDMPModel(_affine_flow(a, b), _const(rate), Q, x0, name=name)


def _jumpdiff_model(c, d, name):
    d = c.block(d, "model.jumpdiff", _JUMPDIFF, ("x0",))
    x0 = c.number(d, "x0", "model.jumpdiff", 0.0)
    drift = c.number(d, "drift", "model.jumpdiff", 0.0)
    sigma = c.number(d, "sigma", "model.jumpdiff", 0.0)
    atoms = d.get("atoms") or []
    if not isinstance(atoms, list):
        c.add("model.jumpdiff.atoms must be a list")
        atoms = []
    atom_times, atom_kernels, clock = [], {}, {}
    for i, a in enumerate(atoms):
        where = f"model.jumpdiff.atoms[{i}]"
        a = c.block(a, where, _ATOM, ("time", "marks"))
        t = c.number(a, "time", where)
        k = _kernel(c, a.get("marks"), f"{where}.marks", target=False) if "marks" in a else None
        if t is None or k is None:
            continue
        atom_times.append(t)
        atom_kernels[t] = k
        cj = c.number(a, "clock_jump", where, 0.0, lo=0.0)
        if cj:
            clock[t] = cj
    jumps = d.get("jumps")
    rate, marks, gamma = 0.0, None, None
    gamma_name = "mark"
    if jumps is not None:
        jumps = c.block(jumps, "model.jumpdiff.jumps", _JUMPS, ("rate", "marks"))
        rate = c.number(jumps, "rate", "model.jumpdiff.jumps", 0.0, lo=0.0)
        marks = _kernel(c, jumps.get("marks"), "model.jumpdiff.jumps.marks", target=False) \
            if "marks" in jumps else None
        gamma_name = jumps.get("gamma", "mark")
        if gamma_name not in _GAMMAS:
            c.add(f"model.jumpdiff.jumps.gamma: unknown built-in {gamma_name!r}; known: {sorted(_GAMMAS)}")
    script = d.get("script")
    if script is not None:
        try:
            script = tuple((float(t), float(e)) for t, e in script)
        except (TypeError, ValueError):
            c.add("model.jumpdiff.script must be a list of [time, mark] pairs")
            script = None
    if c.errors:
        return None
    if jumps is not None or atom_times:
        # the jump map vanishes at the declared predictable times
        gamma = _off_atoms(_GAMMAS[gamma_name], atom_times)
    else:
        gamma = _const(0.0)
    atom_times = sorted(atom_times)
    kernel = None
    if atom_times:
        kernel = atom_kernels[atom_times[0]] if len(atom_times) == 1 else ByTime(atom_kernels)
    return JumpDiffusionModel(_const(drift), _const(sigma), gamma, x0, rate=rate if marks is not None else 0.0,
                              marks=marks, atom_times=tuple(atom_times), atom_kernel=kernel,
                              clock_jumps=clock, script=script, name=name)


def _problem(c, d, model):
    d = c.block(d, "bsde", _BSDE)
    g_name = d.get("g", "identity")
    if g_name not in G_BUILTINS:
        c.add(f"bsde.g: unknown built-in {g_name!r}; known: {sorted(G_BUILTINS)}")
        return None, None
    drv = c.block(d.get("driver", {}), "bsde.driver", _DRIVER)
    coeffs = {k: c.number(drv, k, "bsde.driver", 0.0) for k in _DRIVER}
    is_pdmp = isinstance(model, PDMPModel)
    clock = d.get("clock", "compensator" if is_pdmp else "time")
    if clock not in ("time", "compensator"):
        c.add("bsde.clock must be 'time' or 'compensator'")
    with_bm = d.get("with_brownian", not is_pdmp)
    if c.errors:
        return None, None
    g = G_BUILTINS[g_name]
    return BSDEProblem(g, Driver(**coeffs), clock=clock, with_brownian=bool(with_bm)), g


def _oracle_factory(c, name, model, horizon, g, params):
    if name in (None, "none"):
        return None
    if name == "integro":
        if not isinstance(model, PDMPModel):
            c.add("bsde.oracle: integro needs a PDMP model")
            return None
        return lambda: IntegroOracle(model, horizon, g).oracle("integro")
    if name in CLOSED_FORMS:
        return lambda: closed_form_oracle(name, horizon, **params)
    c.add(f"bsde.oracle: unknown oracle {name!r}")
    return None


# ---------------------------------------------------------------------------
# top level


def parse_config(text):
    """Parse YAML text; raises :class:`ConfigError` listing every violation."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"malformed YAML: {exc}"]) from None
    c = _Collector()
    data = c.block(data, "", _TOP, ("model", "run"))
    name = str(data.get("name", "experiment"))

    run = c.block(data.get("run"), "run", _RUN, ("paths", "seed"))
    paths = c.number(run, "paths", "run", integer=True)
    if paths is not None and paths < 2:
        c.add(f"run.paths must be at least 2, got {paths}")
    steps = c.number(run, "steps", "run", 50, integer=True)
    if steps is not None and steps < 2:
        c.add(f"run.steps must be at least 2, got {steps}")
    seed = c.number(run, "seed", "run", integer=True, lo=0)
    degree = c.number(run, "basis_degree", "run", 3, integer=True, lo=0)
    cells = c.number(run, "basis_cells", "run", 1, integer=True, lo=1)
    horizon = c.number(run, "horizon", "run")
    if horizon is not None and horizon <= 0:
        c.add("run.horizon must be positive")
    holdout = run.get("holdout", True)
    if not isinstance(holdout, bool):
        c.add("run.holdout must be true or false")
    tol_in = c.block(run.get("tolerances", {}), "run.tolerances", _TOL)
    tolerances = {k: c.number(tol_in, k, "run.tolerances", v, lo=0.0) for k, v in DEFAULT_TOLERANCES.items()}

    checks = data.get("checks", list(CHECKS))
    if isinstance(checks, str):
        checks = [s.strip() for s in checks.split(",") if s.strip()]
    if not isinstance(checks, list):
        c.add("checks must be a list of check names")
        checks = []
    for ch in checks:
        if ch not in CHECKS:
            c.add(f"checks: unknown check {ch!r}; known: {', '.join(CHECKS)}")
    control = data.get("control", "none")
    if control not in CONTROLS:
        c.add(f"control must be one of {', '.join(CONTROLS)}")

    out = c.block(data.get("output", {}), "output", _OUTPUT)
    out_dir = str(out.get("dir", "out"))
    figures = out.get("figures", True)
    atom_paths = c.number(out, "atom_paths", "output", 1000, integer=True, lo=0)

    bm = _benchmark(c, data.get("model"), data.get("bsde"), horizon)
    if c.errors:
        raise ConfigError(c.errors)
    return ExperimentConfig(name, bm, paths, steps, seed, degree, cells, holdout, tolerances,
                            tuple(dict.fromkeys(checks)), control, out_dir, bool(figures), atom_paths)


def _benchmark(c, model_d, bsde_d, horizon):
    model_d = c.block(model_d, "model", _MODEL)
    present = [k for k in ("benchmark", "pdmp", "jumpdiff") if k in model_d]
    if len(present) != 1:
        c.add(f"model: exactly one model must be given (benchmark, pdmp or jumpdiff), found {len(present)}")
        return None
    bsde_d = bsde_d if bsde_d is not None else {}
    if not isinstance(bsde_d, dict):
        c.add("bsde must be a mapping")
        return None
    kind = present[0]
    if kind == "benchmark":
        bid = model_d["benchmark"]
        if bid not in benchmarks.REGISTRY:
            c.add(f"model.benchmark: unknown benchmark {bid!r}; known: {sorted(benchmarks.REGISTRY)}")
            return None
        params = {"T": horizon} if horizon is not None else {}
        bm = benchmarks.get(bid, **params)
        extra = set(bsde_d) - {"benchmark", "oracle"}
        if extra:
            c.add(f"bsde: keys {sorted(extra)} cannot override a benchmark problem")
        if "benchmark" in bsde_d and bsde_d["benchmark"] != bid:
            c.add(f"bsde.benchmark {bsde_d['benchmark']!r} does not match model.benchmark {bid!r}")
        if "oracle" in bsde_d:
            if bsde_d["oracle"] in (None, "none"):
                bm.oracle_factory = None
            elif bsde_d["oracle"] != "benchmark":
                c.add("bsde.oracle for a benchmark model must be 'benchmark' or 'none'")
        return bm
    if "benchmark" in bsde_d:
        c.add("bsde.benchmark needs model.benchmark; give g/driver for an explicit model")
        return None
    T = horizon if horizon is not None else 1.0
    name = "custom-" + kind
    try:
        model = _pdmp_model(c, model_d["pdmp"], name) if kind == "pdmp" else \
            _jumpdiff_model(c, model_d["jumpdiff"], name)
    except ValueError as exc:
        c.add(f"model.{kind}: {exc}")
        return None
    if model is None:
        return None
    problem, g = _problem(c, bsde_d, model)
    if problem is None:
        return None
    oracle = _oracle_factory(c, bsde_d.get("oracle"), model, T, g, {})
    return Benchmark(name, model, T, problem, oracle, "explicit model from config")


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
