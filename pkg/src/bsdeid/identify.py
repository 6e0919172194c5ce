"""Statistical and pathwise checks of the identification formulas for (Z, U)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from itertools import product

from .kernels import Tabulated
from .measures import (
    K_MASS_TOL,
    CompensatorSpec,
    NodeBatch,
    PredictableField,
    batch_atom_masses,
    bracket_paths,
    integral_paths,
    is_divergent,
    kernel_decompose_batch,
    norm_totals,
)
from .processes import PDMPModel, _vec_tx, as_ensemble

Z_BAND = 3.29
PATHWISE_TOL = 1e-9
REL_TOL = 0.05


@dataclass
class MeanTest:
    mean: float
    se: float
    passed: bool
    sup: float = float("nan")

    @classmethod
    def of(cls, values, band=Z_BAND):
        values = np.asarray(values, dtype=float)
        n = values.size
        mean = math.fsum(values) / n
        se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        return cls(mean, se, bool(abs(mean) <= band * se) if se > 0 else mean == 0.0)


@dataclass
class IdentificationReport:
    z_rel_error: float = float("nan")
    martingale_stat: MeanTest | None = None
    h_nuc_l2: float = float("nan")
    h_nuc_rel: float = float("nan")
    h_nud_residual: float = float("nan")
    h_nud_rel: float = float("nan")
    l_fit: dict = field(default_factory=dict)
    orthogonality_stat: MeanTest | None = None
    notes: list = field(default_factory=list)


def compute_H(U, oracle, scenario):
    """``H = U - (v(s, X_- + gamma~) - v(s, X_-))``, keeping ``U``'s treatment of realised atoms."""
    model = as_ensemble(scenario).model
    if not isinstance(model, PDMPModel) and getattr(model, "gamma", None) is None:
        raise ValueError("the model provides no jump map gamma~")
    inc = oracle.increment_field(model)

    def H(t, x, e):
        return U(t, x, e) - inc(t, x, e)

    realized = None
    if not U.predictable:
        def realized(t, xm, e, xp):
            return U.at_atoms(t, xm, e, xp) - inc(t, xm, e)
    return PredictableField(H, name="H", realized=realized, atom_term=U.atom_term)


@dataclass
class MartingaleNull:
    terminal: np.ndarray
    sup: np.ndarray
    test: MeanTest

    @property
    def pathwise_exact(self):
        return bool(np.max(self.sup) <= PATHWISE_TOL)


def martingale_null_test(H, ensemble):
    """Terminal values and per-path sup-norm of ``H * (mu - nu)``; mean test at 3.29 SE."""
    ens = as_ensemble(ensemble)
    g2, _ = norm_totals(H, ens.compensator, ens.batch)
    if is_divergent(g2):
        raise ValueError("H is not square integrable against the compensator")
    paths = integral_paths(H, ens.compensator, ens.batch)
    valid = ens.batch.valid
    terminal = paths[np.arange(len(ens)), ens.batch.n_nodes - 1]
    sup = np.where(valid, np.abs(paths), 0.0).max(axis=1)
    test = MeanTest.of(terminal)
    test.sup = float(sup.max())
    if len(ens) == 1:
        test.passed = bool(test.sup <= PATHWISE_TOL)
    return MartingaleNull(terminal, sup, test)


def identify_Z(Z, oracle, ensemble):
    """Relative ``L^2(dP dt)`` error of ``Z`` against ``sigma * dv`` on the base grid."""
    ens = as_ensemble(ensemble)
    model = ens.model
    if isinstance(model, PDMPModel) or ens.brownian is None:
        raise ValueError("the model has no continuous martingale part; use the jump identification checks")
    t = ens.base_nodes
    X = ens.base_values
    sig = _vec_tx(model.sigma, np.broadcast_to(t, X.shape), X)
    if not np.any(sig != 0):
        raise ValueError("the model has no continuous martingale part; use the jump identification checks")
    target = sig * oracle.dv(np.broadcast_to(t, X.shape), X)
    dt = np.diff(t)
    err = ((Z[:, :-1] - target[:, :-1]) ** 2 * dt).sum(axis=1)
    ref = (target[:, :-1] ** 2 * dt).sum(axis=1)
    return float(math.sqrt(math.fsum(err) / math.fsum(ref)))


@dataclass
class KDecomposition:
    l_fit: dict
    l_paths: np.ndarray
    h_nuc_l2: float
    h_nud_residual: float
    h_nuc_rel: float
    h_nud_rel: float


def _hit_labels(ens):
    b = ens.batch
    label = "boundary hit" if ens.is_pdmp else "predictable time"
    order = np.cumsum(b.nu_atom, axis=1)
    return label, order


def decompose_H_on_K(H, ensemble, U=None):
    """Kernel-mean fit ``l`` on K and the remaining norms of ``H``.

    ``h_nuc_l2`` is the ensemble mean of ``int |H|^2 dnu^c``, ``h_nud_residual``
    the ensemble mean of the post-fit residual on atoms.  If ``U`` is given the
    relative versions divide by the matching norms of ``U``.
    """
    ens = as_ensemble(ensemble)
    d = kernel_decompose_batch(H, ens.compensator, ens.batch)
    nuc = math.fsum(d.ac_l2) / len(ens)
    nud = math.fsum(d.k_residual + d.jk_l2) / len(ens)
    label, order = _hit_labels(ens)
    l_fit = {}
    b = ens.batch
    for n in range(1, int(order.max()) + 1 if order.size else 1):
        sel = b.nu_atom & (order == n)
        vals = d.l[sel]
        vals = vals[~np.isnan(vals)]
        if vals.size:
            l_fit[f"{label} #{n}"] = math.fsum(vals) / vals.size
    nuc_rel = nud_rel = float("nan")
    if U is not None:
        du = kernel_decompose_batch(U, ens.compensator, ens.batch)
        _, l2u = norm_totals(U, ens.compensator, ens.batch)
        u_c = math.fsum(du.ac_l2) / len(ens)
        u_d = (math.fsum(l2u) - math.fsum(du.ac_l2)) / len(ens)
        nuc_rel = math.sqrt(nuc / u_c) if u_c > 0 else float("nan")
        nud_rel = math.sqrt(nud / u_d) if u_d > 0 else float("nan")
    return KDecomposition(l_fit, d.l, nuc, nud, nuc_rel, nud_rel)


def extract_remainder(oracle, ensemble):
    """``A^v = v(t, X_t) - v(0, X_0) - int dv dX^c - int (v-jump) d(mu - nu)`` at every node.

    Uses the same left-point sums as the forward Euler scheme.
    """
    ens = as_ensemble(ensemble)
    b = ens.batch
    model = ens.model
    v = oracle.v(b.t, b.x)
    out = v - v[:, :1]
    if not ens.is_pdmp and ens.brownian is not None:
        sel = b.ac_mask()
        dW = np.zeros(b.shape)
        dW[:, 1:] = np.diff(ens.brownian, axis=1)
        integrand = np.zeros(b.shape)
        integrand[sel] = oracle.dv(b.t[sel], b.x[sel]) * _vec_tx(model.sigma, b.t[sel], b.x[sel])
        inc = np.zeros(b.shape)
        inc[:, 1:] = integrand[:, :-1] * dW[:, 1:]
        out = out - np.cumsum(inc, axis=1)
    out = out - integral_paths(oracle.increment_field(model), ens.compensator, b)
    return out


def continuous_martingale(ensemble):
    ens = as_ensemble(ensemble)
    if ens.brownian is None:
        return np.zeros(ens.batch.shape)
    return ens.brownian


def orthogonality_test(remainder, N, ensemble):
    """Mean discrete covariation ``sum dA^v dN`` within 3.29 SE of zero."""
    ens = as_ensemble(ensemble)
    valid = ens.batch.valid
    dA = np.diff(remainder, axis=1)
    dN = np.diff(N, axis=1)
    cov = np.where(valid[:, 1:], dA * dN, 0.0).sum(axis=1)
    if not np.any(cov):
        return MeanTest(0.0, 0.0, True, 0.0)
    test = MeanTest.of(cov)
    test.sup = float(np.max(np.abs(cov)))
    return test


def violating_field(U, c=1.0, bonus=1.0):
    """Positive control: ``U`` shifted by ``c`` everywhere and by a further ``bonus`` on realised atoms.

    A predictable shift alone keeps the integral a martingale; the bonus,
    which looks at the realised atom, is what breaks the mean test.
    """
    def shifted(t, x, e):
        return U(t, x, e) + c

    def realized(t, xm, e, xp):
        return U.at_atoms(t, xm, e, xp) + c + bonus

    return PredictableField(shifted, name="violating-U", realized=realized, atom_term=U.atom_term)


def shift_on_K(U, l):
    """``U + l(t, x_-) 1_K``: the same jump component up to the kernel ambiguity on ``K``."""
    term = l if U.atom_term is None else (lambda t, x: U.atom_term(t, x) + l(t, x))
    return PredictableField(U.fn, U.support_hint, name=f"{U.name}+l1_K", realized=U.realized, atom_term=term)


# ---------------------------------------------------------------------------
# bracket isometry, J = K classification, exhaustive kernel check


@dataclass
class IsometryResult:
    mean_square: float
    mean_bracket: float
    test: MeanTest


def _terminal(paths, batch):
    return paths[np.arange(batch.shape[0]), batch.n_nodes - 1]


def isometry_test(W, nu, batch, band=3.0):
    """``E[(W * (mu - nu))_T^2] = E[C(W)_T]``: mean of the per-path differences within ``band`` SE."""
    I = _terminal(integral_paths(W, nu, batch), batch)
    C = bracket_paths(W, nu, batch)
    if is_divergent(C):
        raise ValueError("C(W) diverges; W is not in the integrable class")
    C = _terminal(C, batch)
    n = I.size
    return IsometryResult(math.fsum(I * I) / n, math.fsum(C) / n, MeanTest.of(I * I - C, band))


@dataclass
class Classification:
    passed: bool
    predictable_jumps: int
    j_atoms: int
    k_atoms: int
    max_mass_error: float
    p_star_ok: bool
    atom_times: np.ndarray


def classify_ensemble(ensemble):
    """Every compensator atom carries mass one (``J = K``), each predictable jump of ``mu``
    sits on such an atom, and ``p*_T`` counts the predictable jumps."""
    ens = as_ensemble(ensemble)
    b = ens.batch
    masses = batch_atom_masses(ens.compensator, b)
    in_j = masses > 0
    in_k = np.abs(masses - 1.0) <= K_MASS_TOL
    pred = b.has_mu & b.mu_pred
    on_atom = bool(np.all(b.nu_atom[pred]))
    p_ok = True
    p_star = getattr(ens, "p_star", None)
    if p_star is not None:
        p_ok = bool(np.array_equal(_terminal(p_star, b), pred.sum(axis=1)))
    err = float(np.max(np.abs(masses - 1.0))) if masses.size else 0.0
    passed = bool(np.array_equal(in_j, in_k)) and on_atom and p_ok
    return Classification(passed, int(pred.sum()), int(in_j.sum()), int(in_k.sum()), err, p_ok,
                          b.t[b.nu_atom])


@dataclass
class KernelEnumeration:
    cases: int
    bracket: np.ndarray
    residual: np.ndarray
    mismatches: int

    @property
    def passed(self):
        return self.mismatches == 0


def _atom_configs(n_marks, masses, values):
    """All (weights, W) pairs for one atom with ``n_marks`` marks and total mass at most one."""
    out = []
    for w in product(masses, repeat=n_marks):
        if sum(w) > 1.0:
            continue
        for v in product(values, repeat=n_marks):
            out.append((w, v))
    return out


def enumerate_kernel_cases(max_atoms=3, max_marks=4, masses=(0.0, 0.25, 0.5, 0.75, 1.0), values=(-1.0, 0.0, 1.0)):
    """Exhaustive check of ``C(W)_T = 0  <=>  ||W - l 1_K||^2 = 0`` on purely atomic compensators.

    Cases range over 1 to ``max_atoms`` predictable times sharing at most
    ``max_marks`` marks in total, every mark mass from ``masses`` with each
    atom's total at most one, and every ``W`` value from ``values``.  All
    cases run as one batch through the library's bracket and decomposition.
    """
    per_atom = {m: _atom_configs(m, masses, values) for m in range(1, max_marks + 1)}
    rows_w, rows_v, rows_n = [], [], []
    for a in range(1, max_atoms + 1):
        for split in product(range(1, max_marks + 1), repeat=a):
            if sum(split) > max_marks:
                continue
            for combo in product(*(per_atom[m] for m in split)):
                w = np.zeros((max_atoms, max_marks))
                v = np.zeros((max_atoms, max_marks))
                for j, (wj, vj) in enumerate(combo):
                    w[j, : len(wj)] = wj
                    v[j, : len(vj)] = vj
                rows_w.append(w)
                rows_v.append(v)
                rows_n.append(a)
    W_tab = np.array(rows_v).reshape(-1, max_marks)
    weights = np.array(rows_w).reshape(-1, max_marks)
    n_atoms = np.array(rows_n)
    n = n_atoms.size
    # state label at atom j of case i is i * max_atoms + j: it indexes both tables
    L = max_atoms + 2
    t = np.broadcast_to(np.arange(L, dtype=float), (n, L)).copy()
    label = np.zeros((n, L))
    label[:, 1:-1] = np.arange(n)[:, None] * max_atoms + np.arange(max_atoms)[None, :]
    label[:, -1] = label[:, -2]
    atom = np.zeros((n, L), dtype=bool)
    atom[:, 1:-1] = np.arange(max_atoms)[None, :] < n_atoms[:, None]
    batch = NodeBatch(t, label, label.copy(), np.zeros((n, L)), np.full(n, L), np.full((n, L), np.nan),
                      np.zeros((n, L), dtype=bool), atom)
    points = np.broadcast_to(np.arange(max_marks, dtype=float), weights.shape)
    nu = CompensatorSpec(None, np.arange(1, max_atoms + 1, dtype=float), Tabulated(points, weights))

    def W(t, x, e):
        r = np.asarray(x, dtype=float).astype(np.intp)
        c = np.asarray(e, dtype=float).astype(np.intp)
        return W_tab[r, c]

    field = PredictableField(W, name="enumerated-W")
    C = _terminal(bracket_paths(field, nu, batch), batch)
    res = kernel_decompose_batch(field, nu, batch).residual_l2
    mismatches = int(np.sum((C == 0.0) != (res == 0.0)))
    return KernelEnumeration(n, C, res, mismatches)
