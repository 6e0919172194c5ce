"""Property tests: bracket identities against a direct computation, linearity, round trips."""

import numpy as np
from conftest import flat_path
from hypothesis import example, given, settings
from hypothesis import strategies as st

from bsdeid.identify import MeanTest
from bsdeid.kernels import ByTime, Discrete, Scaled
from bsdeid.measures import (
    INACCESSIBLE,
    PREDICTABLE,
    CompensatorSpec,
    MarkedPointMeasure,
    PredictableField,
    bracket_C,
    fmt,
    integral_paths,
    kernel_decompose,
    norms,
)
from bsdeid.processes import simulate_atom_ensemble

ATOM_TIMES = (0.2, 0.5, 0.8)
quarters = st.sampled_from([0.25, 0.5, 0.75, 1.0])
values = st.floats(-3.0, 3.0, allow_nan=False)


@st.composite
def atom(draw):
    """One predictable atom: marks 0..k-1, mark weights, total mass and W on each mark."""
    k = draw(st.integers(1, 3))
    raw = draw(st.lists(st.integers(1, 4), min_size=k, max_size=k))
    probs = np.array(raw, dtype=float) / sum(raw)
    mass = draw(quarters)
    w = draw(st.lists(st.sampled_from([-1.0, 0.0, 0.5, 1.0]), min_size=k, max_size=k))
    return probs, mass, np.array(w)


def _setup(atoms):
    times = ATOM_TIMES[: len(atoms)]
    kernels = {t: Scaled(Discrete(np.arange(len(p), dtype=float), p), m) for t, (p, m, _) in zip(times, atoms)}
    nu = CompensatorSpec(None, list(times), _by_time(kernels))
    table = {t: w for t, (_, _, w) in zip(times, atoms)}

    def W(t, x, e):
        t, e = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(e, dtype=float))
        out = np.zeros(t.shape)
        for s, w in table.items():
            sel = np.abs(t - s) <= 1e-12
            out[sel] = w[e[sel].astype(int)]
        return out

    return flat_path(extra=times), nu, PredictableField(W, name="W"), kernels


def _by_time(kernels):
    return ByTime(kernels) if len(kernels) > 1 else next(iter(kernels.values()))


def _direct_bracket(atoms):
    """Atom by atom: sum_e w (W - hat)^2 + (1 - m) hat^2, weights w = m p."""
    total = 0.0
    for p, m, v in atoms:
        w = m * p
        hat = float(np.dot(w, v))
        total += float(np.dot(w, (v - hat) ** 2)) + (1.0 - m) * hat * hat
    return total


def _direct_residual(atoms):
    total = 0.0
    for p, m, v in atoms:
        w = m * p
        if abs(m - 1.0) <= 1e-12:
            v = v - float(np.dot(w, v))
        total += float(np.dot(w, v * v))
    return total


@settings(max_examples=150, deadline=None)
@given(st.lists(atom(), min_size=1, max_size=3))
def test_bracket_matches_a_direct_computation(atoms):
    path, nu, W, _ = _setup(atoms)
    C = bracket_C(W, nu, path).terminal
    assert abs(C - _direct_bracket(atoms)) <= 1e-12
    g2, l2 = norms(W, nu, path)
    assert -1e-15 <= g2 <= l2 + 1e-12


@settings(max_examples=150, deadline=None)
@given(st.lists(atom(), min_size=1, max_size=3))
def test_zero_bracket_iff_zero_residual(atoms):
    path, nu, W, _ = _setup(atoms)
    C = bracket_C(W, nu, path).terminal
    _, res = kernel_decompose(W, nu, path)
    assert abs(res - _direct_residual(atoms)) <= 1e-12
    assert (abs(C) <= 1e-12) == (abs(res) <= 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(atom(), min_size=1, max_size=3), values, values, st.integers(0, 2 ** 16))
def test_integral_is_linear(atoms, a, b, seed):
    _, nu, W, kernels = _setup(atoms)
    ens = simulate_atom_ensemble(kernels, 1.0, seed=seed, n_paths=20)
    V = PredictableField(lambda t, x, e: np.cos(np.asarray(e, dtype=float)) + np.asarray(t), name="V")
    combo = PredictableField(lambda t, x, e: a * W(t, x, e) + b * V(t, x, e), name="aW+bV")
    lhs = integral_paths(combo, ens.compensator, ens.batch)
    rhs = a * integral_paths(W, ens.compensator, ens.batch) + b * integral_paths(V, ens.compensator, ens.batch)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(atom(), min_size=1, max_size=3), st.integers(0, 2 ** 16))
def test_constant_on_full_atoms_integrates_to_zero(atoms, seed):
    atoms = [(p, 1.0, w) for p, _, w in atoms]
    _, nu, _, kernels = _setup(atoms)
    ens = simulate_atom_ensemble(kernels, 1.0, seed=seed, n_paths=10)
    c = PredictableField(lambda t, x, e: 2.5 + 0 * np.asarray(e, dtype=float), name="c")
    assert np.all(np.abs(integral_paths(c, ens.compensator, ens.batch)) <= 1e-12)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.floats(-5, 5).filter(lambda e: e != 0), st.booleans()),
                max_size=6, unique_by=lambda r: r[0]))
@example(rows=[])
def test_measure_tsv_round_trips(rows):
    atoms = [(t, e, PREDICTABLE if p else INACCESSIBLE) for t, e, p in rows]
    mu = MarkedPointMeasure.from_atoms(atoms)
    back = MarkedPointMeasure.from_tsv(mu.to_tsv())
    assert back.atoms() == mu.atoms()
    assert back.count(1.0) == len(rows)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50), st.floats(-100, 100))
def test_mean_test_is_shift_equivariant(xs, shift):
    x = np.array(xs)
    a, b = MeanTest.of(x), MeanTest.of(x + shift)
    assert abs((b.mean - a.mean) - shift) <= 1e-9 * (1 + abs(shift))
    assert abs(b.se - a.se) <= 1e-9 * (1 + abs(shift))
