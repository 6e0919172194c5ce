import numpy as np
import pytest
from conftest import const, poisson_model

from bsdeid import benchmarks
from bsdeid.identify import (
    MeanTest,
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
from bsdeid.kernels import Discrete, Scaled, Uniform
from bsdeid.measures import PredictableField
from bsdeid.processes import simulate_atom_ensemble, simulate_jumpdiff_ensemble, simulate_pdmp_ensemble


def _ensemble(name, n, seed, steps=50):
    bm = benchmarks.get(name)
    sim = simulate_pdmp_ensemble if bm.is_pdmp else simulate_jumpdiff_ensemble
    return bm, sim(bm.model, bm.horizon, seed, n, steps)


# -- mean test -----------------------------------------------------------


def test_mean_test_degenerate_sample():
    assert MeanTest.of(np.zeros(5)).passed
    assert not MeanTest.of(np.ones(5)).passed


def test_mean_test_band():
    x = np.array([1.0, -1.0] * 50) + 0.05
    t = MeanTest.of(x)
    assert t.mean == pytest.approx(0.05) and t.se == pytest.approx(np.std(x, ddof=1) / 10)
    assert t.passed and not MeanTest.of(x, band=0.1).passed


# -- H and the martingale null -------------------------------------------


@pytest.mark.parametrize("name", benchmarks.PDMP_BENCHMARKS)
def test_oracle_increment_gives_zero_H(name):
    bm, ens = _ensemble(name, 200, seed=1)
    oracle = bm.oracle()
    H = compute_H(oracle.increment_field(bm.model), oracle, ens)
    m = martingale_null_test(H, ens)
    assert m.pathwise_exact and m.test.passed
    assert np.all(m.terminal == 0.0)


def test_shift_on_K_is_invisible_to_the_integral():
    bm, ens = _ensemble("pdmp-deterministic", 4, seed=2)
    oracle = bm.oracle()
    U = shift_on_K(oracle.increment_field(bm.model), const(0.7))
    H = compute_H(U, oracle, ens)
    m = martingale_null_test(H, ens)
    assert m.test.sup <= 1e-12
    kd = decompose_H_on_K(H, ens)
    assert list(kd.l_fit) == ["boundary hit #1"]
    assert kd.l_fit["boundary hit #1"] == pytest.approx(0.7, abs=1e-12)
    assert kd.h_nud_residual <= 1e-24 and kd.h_nuc_l2 == 0.0


def test_violating_control_breaks_both_tests():
    bm, ens = _ensemble("pdmp-interior", 5000, seed=3)
    oracle = bm.oracle()
    H = compute_H(violating_field(oracle.increment_field(bm.model)), oracle, ens)
    m = martingale_null_test(H, ens)
    assert not m.pathwise_exact
    assert not m.test.passed and m.test.sup > 0


def test_predictable_shift_alone_stays_a_martingale():
    bm, ens = _ensemble("pdmp-interior", 20000, seed=4)
    oracle = bm.oracle()
    H = compute_H(violating_field(oracle.increment_field(bm.model), c=1.0, bonus=0.0), oracle, ens)
    m = martingale_null_test(H, ens)
    assert not m.pathwise_exact and m.test.passed


def test_compute_H_needs_a_jump_map():
    bm, ens = _ensemble("brownian-linear", 10, seed=5, steps=5)
    bm.model.gamma = None
    with pytest.raises(ValueError):
        compute_H(PredictableField(const(0.0)), bm.oracle(), ens)


# -- Z -------------------------------------------------------------------


def test_identify_Z_exact_on_brownian_linear():
    bm, ens = _ensemble("brownian-linear", 50, seed=6, steps=10)
    Z = np.ones(ens.base_values.shape)
    assert identify_Z(Z, bm.oracle(), ens) == 0.0
    assert identify_Z(2 * Z, bm.oracle(), ens) == pytest.approx(1.0)


def test_identify_Z_rejects_pure_jump_models():
    bm, ens = _ensemble("pdmp-interior", 10, seed=7, steps=5)
    with pytest.raises(ValueError):
        identify_Z(np.zeros(ens.base_values.shape), bm.oracle(), ens)
    ens = simulate_jumpdiff_ensemble(poisson_model(), 1.0, seed=8, n_paths=10, steps=5)
    oracle = benchmarks.get("poisson-linear").oracle()
    with pytest.raises(ValueError):
        identify_Z(np.zeros(ens.base_values.shape), oracle, ens)


# -- orthogonality -------------------------------------------------------


def test_linear_value_has_no_remainder():
    bm, ens = _ensemble("brownian-linear", 100, seed=9, steps=20)
    rem = extract_remainder(bm.oracle(), ens)
    np.testing.assert_allclose(rem, 0.0, atol=1e-12)
    t = orthogonality_test(rem, continuous_martingale(ens), ens)
    assert t.passed and abs(t.mean) <= 1e-12


def test_heat_remainder_is_orthogonal():
    bm, ens = _ensemble("heat-quadratic", 20000, seed=10)
    rem = extract_remainder(bm.oracle(), ens)
    assert np.any(rem != 0.0)
    t = orthogonality_test(rem, continuous_martingale(ens), ens)
    assert t.passed and t.se > 0


def test_pdmp_has_no_continuous_martingale():
    bm, ens = _ensemble("pdmp-interior", 50, seed=11, steps=10)
    N = continuous_martingale(ens)
    assert np.all(N == 0.0)
    t = orthogonality_test(extract_remainder(bm.oracle(), ens), N, ens)
    assert t.passed and t.mean == 0.0


# -- isometry ------------------------------------------------------------


def test_isometry_on_the_boundary_pdmp():
    bm, ens = _ensemble("pdmp-boundary", 20000, seed=12)
    W = PredictableField(lambda t, x, e: np.cos(2 * x) * e + t * e * e, name="W")
    r = isometry_test(W, ens.compensator, ens.batch)
    assert r.test.passed
    assert r.mean_square == pytest.approx(r.mean_bracket, rel=0.05)


def test_isometry_with_partial_atoms():
    kern = {0.25: Scaled(Uniform(-1.0, 1.0), 0.5), 0.5: Scaled(Discrete([-1.0, 2.0], [0.5, 0.5]), 0.5)}
    ens = simulate_atom_ensemble(kern, 1.0, seed=13, n_paths=20000)
    W = PredictableField(lambda t, x, e: 1.0 + e + 0 * x, name="W")
    r = isometry_test(W, ens.compensator, ens.batch)
    assert r.test.passed and r.mean_bracket > 0


# -- J = K ---------------------------------------------------------------


def test_deterministic_flow_classifies():
    bm, ens = _ensemble("pdmp-deterministic", 4, seed=14)
    c = classify_ensemble(ens)
    assert c.passed and c.p_star_ok
    assert c.predictable_jumps == c.j_atoms == c.k_atoms == 4
    np.testing.assert_allclose(c.atom_times, 1.0, atol=1e-12)
    assert c.max_mass_error <= 1e-12


def test_partial_atom_fails_classification():
    ens = simulate_atom_ensemble({0.5: Scaled(Uniform(0.0, 1.0), 0.5)}, 1.0, seed=15, n_paths=20)
    c = classify_ensemble(ens)
    assert not c.passed and c.k_atoms == 0 and c.j_atoms == 20


# -- kernel enumeration --------------------------------------------------


def test_small_kernel_enumeration():
    r = enumerate_kernel_cases(max_atoms=2, max_marks=2)
    assert r.passed and r.cases > 0
    assert np.any(r.bracket == 0.0) and np.any(r.bracket > 0.0)
    assert np.all(r.bracket >= 0.0)


def test_enumeration_single_mark_count():
    # one atom, one mark: masses {0, 1/4, 1/2, 3/4, 1} times values {-1, 0, 1}
    r = enumerate_kernel_cases(max_atoms=1, max_marks=1)
    assert r.cases == 15 and r.passed
    # C vanishes only for zero value, zero mass or full mass
    assert int(np.sum(r.bracket == 0.0)) == 5 + 3 + 3 - 2
