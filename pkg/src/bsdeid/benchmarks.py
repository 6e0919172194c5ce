"""Named benchmark instances: forward model, BSDE problem and value oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BSDEProblem, Driver, IntegroOracle, closed_form_oracle
from .kernels import Dirac, Discrete, Normal, Uniform
from .processes import JumpDiffusionModel, PDMPModel


def _const(c):
    return lambda *args: np.full(np.broadcast(*[np.asarray(a) for a in args]).shape, float(c))


def _identity(x):
    return np.asarray(x, dtype=float)


def _square(x):
    return np.asarray(x, dtype=float) ** 2


def _boundary_payoff(x):
    # vanishes at 1 and averages to 0 under the post-jump law: the value function is continuous
    x = np.asarray(x, dtype=float)
    return 8.0 * x * (x - 1.0) * (x - 0.5)


def _unit_flow(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _mean_reverting(x):
    return 0.5 - np.asarray(x, dtype=float)


def _vanishing_at(t0, scale=1.0):
    def gamma(t, x, e):
        t = np.asarray(t, dtype=float)
        return scale * np.asarray(e, dtype=float) * (np.abs(t - t0) > 1e-12)
    return gamma


def _mark_identity(t, x, e):
    return np.asarray(e, dtype=float) + 0.0 * np.asarray(x, dtype=float)


def _state_scaled(t, x, e):
    return np.asarray(e, dtype=float) * (1.0 + 0.5 * np.tanh(x)) * (np.abs(np.asarray(t) - 0.5) > 1e-12)


G_BUILTINS = {
    "identity": _identity,
    "square": _square,
    "boundary-cubic": _boundary_payoff,
}


@dataclass(eq=False)
class Benchmark:
    id: str
    model: object
    horizon: float
    problem: BSDEProblem
    oracle_factory: object = None
    description: str = ""

    @property
    def is_pdmp(self):
        return isinstance(self.model, PDMPModel)

    def oracle(self):
        return None if self.oracle_factory is None else self.oracle_factory()


def _pdmp_det(T=1.5, q=0.25):
    m = PDMPModel(_unit_flow, _const(0.0), Dirac(target=q), 0.0, name="pdmp-deterministic")
    return Benchmark("pdmp-deterministic", m, T, BSDEProblem(_identity, clock="compensator", with_brownian=False),
                     lambda: closed_form_oracle("pdmp-deterministic", T, q=q),
                     "unit flow from 0, forced jump to q at the boundary, no random jumps")


def _pdmp_interior(T=1.0, lam=2.0):
    m = PDMPModel(_mean_reverting, _const(lam), Uniform(0.1, 0.9, target=True), 0.3, name="pdmp-interior")
    return Benchmark("pdmp-interior", m, T, BSDEProblem(_identity, clock="compensator", with_brownian=False),
                     lambda: closed_form_oracle("pdmp-interior", T, lam=lam),
                     "flow towards 1/2, uniform relocation at rate lam, boundary unreachable")


def _pdmp_boundary(T=1.0, lam=1.0):
    m = PDMPModel(_unit_flow, _const(lam), Uniform(0.1, 0.9, target=True), 0.5, name="pdmp-boundary")
    return Benchmark("pdmp-boundary", m, T,
                     BSDEProblem(_boundary_payoff, clock="compensator", with_brownian=False),
                     lambda: IntegroOracle(m, T, _boundary_payoff).oracle("pdmp-boundary"),
                     "unit flow, uniform relocation at rate lam and forced relocation at 1")


def _brownian_linear(T=1.0):
    m = JumpDiffusionModel(_const(0.0), _const(1.0), _const(0.0), 1.0, name="brownian-linear")
    return Benchmark("brownian-linear", m, T, BSDEProblem(_identity),
                     lambda: closed_form_oracle("brownian-linear", T), "X = 1 + W, g(x) = x")


def _heat_quadratic(T=1.0):
    m = JumpDiffusionModel(_const(0.0), _const(1.0), _const(0.0), 0.5, name="heat-quadratic")
    return Benchmark("heat-quadratic", m, T, BSDEProblem(_square),
                     lambda: closed_form_oracle("heat-quadratic", T), "X = 1/2 + W, g(x) = x^2")


def _poisson_linear(T=1.0):
    m = JumpDiffusionModel(_const(0.0), _const(0.0), _mark_identity, 1.0, rate=1.0, marks=Dirac(size=1.0),
                           name="poisson-linear")
    return Benchmark("poisson-linear", m, T, BSDEProblem(_identity, with_brownian=False),
                     lambda: closed_form_oracle("poisson-linear", T), "X = 1 + N - t, g(x) = x")


def _brownian_poisson(T=1.0):
    m = JumpDiffusionModel(_const(0.0), _const(1.0), _mark_identity, 0.0, rate=1.0, marks=Normal(0.0, 1.0),
                           name="brownian-poisson")
    return Benchmark("brownian-poisson", m, T, BSDEProblem(_identity),
                     lambda: closed_form_oracle("brownian-poisson", T),
                     "Brownian motion plus compensated compound Poisson with normal marks, g(x) = x")


def _jumpdiff_clock(T=1.0):
    m = JumpDiffusionModel(_const(0.3), _const(1.0), _state_scaled, 0.0, rate=1.0, marks=Normal(0.0, 1.0),
                           atom_times=(0.5,), atom_kernel=Discrete([-1.0, 1.0], [0.5, 0.5]),
                           clock_jumps={0.5: 1.0}, name="jumpdiff-clock")
    return Benchmark("jumpdiff-clock", m, T, BSDEProblem(_identity), None,
                     "jump-diffusion whose drift clock jumps at the predictable time 1/2")


def _scripted(T=1.0):
    m = JumpDiffusionModel(_const(0.3), _const(1.0), _state_scaled, 0.0, rate=1.0, marks=Normal(0.0, 1.0),
                           atom_times=(0.5,), atom_kernel=Discrete([-1.0, 1.0], [0.5, 0.5]),
                           clock_jumps={0.5: 1.0}, script=((0.2, 0.5), (0.7, -2.0)), name="scripted-transfer")
    return Benchmark("scripted-transfer", m, T, BSDEProblem(_identity), None,
                     "inaccessible jumps at 0.2 and 0.7, predictable clock jump at 0.5")


REGISTRY = {
    "pdmp-deterministic": _pdmp_det,
    "pdmp-interior": _pdmp_interior,
    "pdmp-boundary": _pdmp_boundary,
    "brownian-linear": _brownian_linear,
    "heat-quadratic": _heat_quadratic,
    "poisson-linear": _poisson_linear,
    "brownian-poisson": _brownian_poisson,
    "jumpdiff-clock": _jumpdiff_clock,
    "scripted-transfer": _scripted,
}

PDMP_BENCHMARKS = ("pdmp-deterministic", "pdmp-interior", "pdmp-boundary")


def get(benchmark_id, **params):
    try:
        factory = REGISTRY[benchmark_id]
    except KeyError:
        raise ValueError(f"unknown benchmark {benchmark_id!r}; known: {sorted(REGISTRY)}") from None
    return factory(**params)
