import numpy as np
import pytest
from conftest import const, interior_pdmp, mark, poisson_model

from bsdeid import benchmarks
from bsdeid.bsde import (
    BSDEProblem,
    Driver,
    FixedPointError,
    IntegroOracle,
    _fit,
    closed_form_oracle,
    flow_hit_value,
    solve_bsde_lsmc,
    solve_bsde_pdmp,
)
from bsdeid.identify import identify_Z
from bsdeid.kernels import Normal
from bsdeid.processes import JumpDiffusionModel, simulate_jumpdiff_ensemble, simulate_pdmp_ensemble

N = 100_000


def _identity(x):
    return np.asarray(x, dtype=float)


def _rel(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2) / np.mean(b ** 2)))


# -- regression basis ----------------------------------------------------


def test_fit_recovers_a_cubic():
    x = np.linspace(-2.0, 3.0, 200)
    y = 1.0 - 2.0 * x + 0.5 * x ** 3
    fit, fitted, res = _fit(x, y, 3)
    np.testing.assert_allclose(fitted, y, atol=1e-10)
    np.testing.assert_allclose(fit(np.array([-5.0, 7.0])), 1.0 - 2.0 * np.array([-5.0, 7.0]) +
                               0.5 * np.array([-5.0, 7.0]) ** 3, rtol=1e-9)
    assert res < 1e-20


def test_piecewise_fit_captures_a_kink():
    x = np.linspace(0.0, 1.0, 400)
    y = np.abs(x - 0.5)
    _, fitted_global, _ = _fit(x, y, 1)
    fit, fitted, _ = _fit(x, y, 1, cells=2)
    assert fit.cells == 2
    np.testing.assert_allclose(fitted, y, atol=1e-12)
    assert np.max(np.abs(fitted_global - y)) > 0.1


def test_single_support_point_gives_a_constant():
    x = np.full(10, 0.3)
    y = np.arange(10.0)
    fit, fitted, _ = _fit(x, y, 3)
    assert fit.points == 1
    np.testing.assert_allclose(fitted, 4.5)
    np.testing.assert_allclose(fit.shifted(1.0)(np.array([0.0, 9.0])), 5.5)


# -- jump-diffusion solver -----------------------------------------------


def _bp_model():
    return JumpDiffusionModel(const(0.0), const(1.0), mark, 0.0, rate=1.0, marks=Normal())


def test_constant_terminal_value():
    ens = simulate_jumpdiff_ensemble(_bp_model(), 1.0, seed=1, n_paths=2000, steps=20)
    sol = solve_bsde_lsmc(BSDEProblem(lambda x: 2.0 + 0 * np.asarray(x)), ens)
    np.testing.assert_allclose(sol.Y, 2.0, atol=1e-12)
    np.testing.assert_allclose(sol.Z[:, :-1], 0.0, atol=1e-12)
    b = ens.batch
    U = sol.U_field()
    u = U.at_atoms(b.t[b.has_mu], b.xl[b.has_mu], b.mu_mark[b.has_mu], b.x[b.has_mu])
    assert u.size > 0
    np.testing.assert_allclose(u, 0.0, atol=1e-12)


def test_brownian_linear_recovers_unit_z():
    bm = benchmarks.get("brownian-linear")
    ens = simulate_jumpdiff_ensemble(bm.model, 1.0, seed=2, n_paths=N, steps=50)
    sol = solve_bsde_lsmc(bm.problem, ens)
    oracle = bm.oracle()
    assert identify_Z(sol.Z, oracle, ens) <= 0.05
    V = oracle.v(np.broadcast_to(ens.base_nodes, sol.Y.shape), ens.base_values)
    assert _rel(sol.Y, V) <= 0.05


def test_compensated_poisson_u_is_the_mark():
    ens = simulate_jumpdiff_ensemble(poisson_model(rate=1.0, size=0.5), 1.0, seed=3, n_paths=N, steps=50)
    sol = solve_bsde_lsmc(BSDEProblem(_identity, with_brownian=False), ens)
    V = ens.base_values
    assert _rel(sol.Y, V) <= 0.05
    b = ens.batch
    has = b.has_mu
    u = sol.U_field().at_atoms(b.t[has], b.xl[has], b.mu_mark[has], b.x[has])
    assert _rel(u, b.mu_mark[has]) <= 0.05


def test_driver_constant_and_linear():
    bm = benchmarks.get("brownian-linear")
    ens = simulate_jumpdiff_ensemble(bm.model, 1.0, seed=4, n_paths=5000, steps=50)
    sol = solve_bsde_lsmc(BSDEProblem(_identity, Driver(const=0.5)), ens)
    # Y_0 = E[X_T] + 0.5 T = 1.5 up to Monte Carlo noise in E[X_T]
    assert abs(sol.Y[0, 0] - (np.mean(ens.base_values[:, -1]) + 0.5)) <= 1e-9
    sol = solve_bsde_lsmc(BSDEProblem(_identity, Driver(by=0.5)), ens)
    assert sol.Y[0, 0] == pytest.approx(np.exp(0.5) * np.mean(ens.base_values[:, -1]), rel=0.01)


def test_step_size_guard():
    bm = benchmarks.get("brownian-linear")
    ens = simulate_jumpdiff_ensemble(bm.model, 1.0, seed=5, n_paths=50, steps=4)
    with pytest.raises(FixedPointError):
        solve_bsde_lsmc(BSDEProblem(_identity, Driver(by=3.0)), ens)


def test_lsmc_rejects_pdmp_ensembles():
    ens = simulate_pdmp_ensemble(interior_pdmp(), 1.0, seed=6, n_paths=10, steps=5)
    with pytest.raises(ValueError):
        solve_bsde_lsmc(BSDEProblem(_identity), ens)


# -- PDMP solver ---------------------------------------------------------


def test_pdmp_constant_terminal_value():
    bm = benchmarks.get("pdmp-boundary")
    ens = simulate_pdmp_ensemble(bm.model, 1.0, seed=7, n_paths=2000, steps=20)
    sol = solve_bsde_pdmp(BSDEProblem(lambda x: 0 * np.asarray(x) - 1.0, clock="compensator",
                                      with_brownian=False), ens)
    np.testing.assert_allclose(sol.Y, -1.0, atol=1e-12)
    U = sol.U_field()
    t = np.full(50, 0.3)
    x = np.linspace(0.05, 0.95, 50)
    np.testing.assert_allclose(U(t, x, 0.9 - x), 0.0, atol=1e-12)


def test_deterministic_flow_forecast():
    bm = benchmarks.get("pdmp-deterministic")
    ens = simulate_pdmp_ensemble(bm.model, bm.horizon, seed=8, n_paths=4, steps=30)
    sol = solve_bsde_pdmp(bm.problem, ens)
    expected = flow_hit_value(ens.base_nodes, ens.base_values[0], bm.horizon, 0.25)
    np.testing.assert_allclose(sol.Y, np.broadcast_to(expected, sol.Y.shape), atol=1e-9)
    np.testing.assert_allclose(expected, 0.75, atol=1e-9)


def test_interior_pdmp_against_the_integro_oracle():
    bm = benchmarks.get("pdmp-interior")
    numeric = IntegroOracle(bm.model, bm.horizon, _identity)
    ens = simulate_pdmp_ensemble(bm.model, bm.horizon, seed=9, n_paths=N, steps=50)
    sol = solve_bsde_pdmp(bm.problem, ens)
    V = numeric.v(np.broadcast_to(ens.base_nodes, sol.Y.shape), ens.base_values)
    assert _rel(sol.Y, V) <= 0.05


# -- oracles -------------------------------------------------------------


def test_heat_quadratic_oracle():
    o = closed_form_oracle("heat-quadratic", T=1.0)
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(o.v(1.0, x), x ** 2, atol=0)
    assert o.fd_check() <= 1e-6


def test_deterministic_flow_oracle_value():
    o = closed_form_oracle("pdmp-deterministic", T=1.5, q=0.25)
    # flow from 0 reaches 1 at t = 1, restarts at 0.25 and runs for 0.5
    assert o.v(0.0, 0.0) == pytest.approx(0.75, abs=1e-15)
    assert o.v(1.2, 0.1) == pytest.approx(0.4, abs=1e-15)


def test_integro_oracle_matches_the_closed_form():
    bm = benchmarks.get("pdmp-interior")
    numeric = IntegroOracle(bm.model, bm.horizon, _identity)
    exact = closed_form_oracle("pdmp-interior", bm.horizon, lam=2.0)
    t, x = np.meshgrid(np.linspace(0, 1, 11), np.linspace(0, 1, 21))
    assert np.max(np.abs(numeric.v(t, x) - exact.v(t, x))) <= 1e-4


def test_integro_oracle_on_the_deterministic_flow():
    m = benchmarks.get("pdmp-deterministic").model
    numeric = IntegroOracle(m, 1.5, _identity)
    # off the null set where the flow reaches the boundary exactly at T
    # and off the restart-at-0.25 null set: t + 1 - x != 1.5 and t + 1.75 - x != 1.5
    t, x = np.meshgrid([0.0, 0.3, 0.65, 1.1], [0.07, 0.33, 0.52, 0.81])
    assert np.min(np.abs(t - 0.5 - x)) > 0.02 and np.min(np.abs(t + 0.25 - x)) > 0.02
    assert np.max(np.abs(numeric.v(t, x) - flow_hit_value(t, x, 1.5, 0.25))) <= 1e-2


def test_integro_oracle_needs_state_free_relocation():
    with pytest.raises(NotImplementedError):
        IntegroOracle(interior_pdmp().__class__(const(0.0), const(1.0), Normal(), 0.5), 1.0, _identity)
