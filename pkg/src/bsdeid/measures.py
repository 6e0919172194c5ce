"""Integer-valued random measures on a time grid, their compensators and
stochastic integrals against ``mu - nu``.

Single-path operations (``stochastic_integral``, ``bracket_C``, ...) take the
per-path types defined here.  Internally every computation runs on a
:class:`NodeBatch`: a padded ``(paths, nodes)`` layout, so an ensemble of
simulated paths and a single hand-built path share one code path.

Conventions
-----------
* The absolutely continuous part of a compensator is integrated on each
  ``(t_k, t_{k+1}]`` and booked at node ``t_{k+1}``.  The rule belongs to the
  compensator: ``"left"`` evaluates at ``(t_k, X_{t_k})`` (the Euler
  convention), ``"trapezoid"`` averages that with ``(t_{k+1}, X_{t_{k+1}-})``,
  which is still predictable and is used where the path between nodes is a
  known deterministic flow.
* Predictable atoms are integrated exactly against their mark kernel,
  evaluated at the left limit ``X_{t-}``.
* Atoms of ``mu`` are evaluated at ``(t, X_{t-}, mark)``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

INACCESSIBLE = "totally-inaccessible"
PREDICTABLE = "predictable"
KINDS = (INACCESSIBLE, PREDICTABLE)

AC_RULES = ("left", "trapezoid")
K_MASS_TOL = 1e-12
NODE_TOL = 1e-12
_CHUNK = 1 << 20  # kernel evaluations per chunk


class IntegrabilityError(ArithmeticError):
    """A compensator quadrature produced a non-finite value."""


class Divergent:
    """Marker for a quantity the definitions leave undefined or infinite.

    Deliberately not a float: arithmetic on it raises ``TypeError``.
    """

    def __init__(self, label):
        self.label = label

    def __repr__(self):
        return f"<{self.label}>"

    def __bool__(self):
        return False


UNDEFINED = Divergent("undefined")
INFINITE_BRACKET = Divergent("infinite bracket")


def is_divergent(value):
    return isinstance(value, Divergent)


# ---------------------------------------------------------------------------
# per-path types


@dataclass(frozen=True, eq=False)
class TimeGrid:
    horizon: float
    nodes: np.ndarray
    extra_nodes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "extra_nodes", np.asarray(self.extra_nodes, dtype=float))
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a grid needs at least the two nodes 0 and T")
        if nodes[0] != 0.0 or nodes[-1] != self.horizon:
            raise ValueError("grid must start at 0 and end at the horizon")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")

    @classmethod
    def uniform(cls, horizon, steps, extra=()):
        base = np.linspace(0.0, horizon, int(steps) + 1)
        base[-1] = horizon
        extra = np.asarray(sorted(set(float(e) for e in extra)), dtype=float)
        if extra.size and (extra.min() <= 0 or extra.max() > horizon):
            raise ValueError("extra nodes must lie in (0, T]")
        nodes, inserted = merge_nodes(base, extra)
        return cls(horizon, nodes, inserted)

    def __len__(self):
        return self.nodes.size

    def index(self, t):
        """Index of node ``t`` (tolerance ``NODE_TOL``); ``ValueError`` if ``t`` is not a node."""
        i = int(np.searchsorted(self.nodes, t - NODE_TOL))
        if i < self.nodes.size and abs(self.nodes[i] - t) <= NODE_TOL:
            return i
        raise ValueError(f"time {t!r} is not a grid node")

    def indices(self, times):
        return np.array([self.index(t) for t in np.atleast_1d(times)], dtype=int)


def merge_nodes(base, extra, tol=NODE_TOL):
    """Union of two sorted node sets; extra nodes within ``tol`` of a base node snap onto it."""
    base = np.asarray(base, dtype=float)
    kept = []
    for e in np.asarray(extra, dtype=float):
        j = np.searchsorted(base, e)
        near = [k for k in (j - 1, j) if 0 <= k < base.size and abs(base[k] - e) <= tol]
        if not near:
            kept.append(e)
    kept = np.asarray(kept, dtype=float)
    return np.union1d(base, kept), kept


@dataclass(eq=False)
class GridPath:
    """A cadlag path sampled on grid nodes, with explicit left limits at jump nodes."""

    grid: TimeGrid
    values: np.ndarray
    left_limits: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.nodes.shape:
            raise ValueError("path length must equal the node count")
        if self.left_limits is None:
            self.left_limits = self.values.copy()
        else:
            self.left_limits = np.asarray(self.left_limits, dtype=float)
            if self.left_limits.shape != self.values.shape:
                raise ValueError("left limits must align with values")
            self.left_limits[0] = self.values[0]

    @property
    def times(self):
        return self.grid.nodes

    @property
    def jumps(self):
        return self.values - self.left_limits

    def at(self, t):
        return self.values[self.grid.index(t)]

    def left(self, t):
        return self.left_limits[self.grid.index(t)]

    @property
    def terminal(self):
        return self.values[-1]

    def to_csv(self, target=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(self.grid.nodes, self.values):
            w.writerow([fmt(t), fmt(v)])
        return _emit(buf.getvalue(), target)

    @classmethod
    def from_csv(cls, source, horizon=None):
        rows = list(csv.DictReader(io.StringIO(_read(source))))
        t = np.array([float(r["t"]) for r in rows])
        v = np.array([float(r["value"]) for r in rows])
        return cls(TimeGrid(horizon if horizon is not None else t[-1], t), v)


@dataclass(eq=False)
class MarkedPointMeasure:
    """Finitely many unit atoms ``delta_(t, mark)``, at most one per time."""

    times: np.ndarray
    marks: np.ndarray
    predictable: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.marks = np.asarray(self.marks, dtype=float).reshape(-1)
        self.predictable = np.asarray(self.predictable, dtype=bool).reshape(-1)
        if not (self.times.shape == self.marks.shape == self.predictable.shape):
            raise ValueError("atom arrays must have equal length")
        if np.any(self.times <= 0):
            raise ValueError("atom times must be strictly positive")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("atom times must be strictly increasing (one atom per time)")

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0, dtype=bool))

    @classmethod
    def from_atoms(cls, atoms):
        atoms = sorted(atoms)
        if not atoms:
            return cls.empty()
        t, e, k = zip(*atoms)
        bad = set(k) - set(KINDS)
        if bad:
            raise ValueError(f"unknown atom kind(s) {sorted(bad)}")
        return cls(t, e, [kk == PREDICTABLE for kk in k])

    def __len__(self):
        return self.times.size

    @property
    def kinds(self):
        return [PREDICTABLE if p else INACCESSIBLE for p in self.predictable]

    def atoms(self):
        return list(zip(self.times.tolist(), self.marks.tolist(), self.kinds))

    def count(self, t=None):
        return int(self.times.size if t is None else np.sum(self.times <= t))

    def to_tsv(self, target=None):
        lines = [f"{fmt(t)}\t{fmt(e)}\t{k}\t{fmt(1.0)}" for t, e, k in self.atoms()]
        return _emit("".join(line + "\n" for line in lines), target)

    @classmethod
    def from_tsv(cls, source):
        atoms = []
        for line in _read(source).splitlines():
            if not line.strip():
                continue
            t, e, k, m = line.split("\t")
            if float(m) != 1.0:
                raise ValueError("measure atoms carry multiplicity 1")
            atoms.append((float(t), float(e), k))
        return cls.from_atoms(atoms)


@dataclass(eq=False)
class CompensatorSpec:
    """Compensator ``nu(ds de) = dA_s phi_s(de)`` realised along one path.

    ``ac`` is a rate measure per unit time (``RateKernel``), ``atom_kernel``
    gives ``hat nu_t`` at each predictable time in ``atom_times``; its total
    mass ``hat nu_t(R)`` must lie in ``[0, 1]``.  The clock ``A`` is the total
    mass process ``nu((0, t] x R)``.
    """

    ac: object = None
    atom_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    atom_kernel: object = None
    ac_rule: str = "left"

    def __post_init__(self):
        if self.ac_rule not in AC_RULES:
            raise ValueError(f"ac_rule must be one of {AC_RULES}")
        self.atom_times = np.asarray(self.atom_times, dtype=float).reshape(-1)
        if self.atom_times.size and self.atom_kernel is None:
            raise ValueError("atom times declared without an atom kernel")
        if np.any(np.diff(self.atom_times) <= 0):
            raise ValueError("atom times must be strictly increasing")

    def with_atoms(self, times):
        return CompensatorSpec(self.ac, times, self.atom_kernel, self.ac_rule)

    def atom_masses(self, path):
        if not self.atom_times.size:
            return np.empty(0)
        idx = path.grid.indices(self.atom_times)
        m = np.asarray(self.atom_kernel.total_mass(self.atom_times, path.left_limits[idx]), dtype=float)
        if np.any(m < -K_MASS_TOL) or np.any(m > 1 + K_MASS_TOL):
            raise ValueError("atom kernel mass outside [0, 1]")
        return m

    def clock(self, path):
        batch = NodeBatch.from_path(path, None, self)
        inc = np.zeros_like(batch.t)
        if self.ac is not None:
            rate, = ac_average(lambda t, x: (self.ac.total_mass(t, x),), batch, self.ac_rule)
            inc[:, 1:] += (batch.dt * rate)[:, :-1]
        inc[batch.nu_atom] += batch_atom_masses(self, batch)
        return GridPath(path.grid, np.cumsum(inc[0, : len(path.grid)]))

    def realize(self, path):
        """Rows ``(t, mark, kind, mass)`` of the quadrature measure actually integrated along ``path``."""
        rows = []
        nodes = path.grid.nodes
        if self.ac is not None and nodes.size > 1:
            dt = np.diff(nodes)
            ends = [(nodes[:-1], path.values[:-1], 1.0)]
            if self.ac_rule == "trapezoid":
                ends = [(nodes[:-1], path.values[:-1], 0.5), (nodes[1:], path.left_limits[1:], 0.5)]
            for tt, xx, share in ends:
                pts, w = self.ac.quadrature(tt, xx)
                for k in range(dt.size):
                    for e, ww in zip(pts[k], w[k]):
                        if ww != 0.0 and dt[k] > 0:
                            rows.append((tt[k], e, "ac", share * dt[k] * ww))
        if self.atom_times.size:
            idx = path.grid.indices(self.atom_times)
            pts, w = self.atom_kernel.quadrature(self.atom_times, path.left_limits[idx])
            for k, t in enumerate(self.atom_times):
                for e, ww in zip(pts[k], w[k]):
                    if ww != 0.0:
                        rows.append((t, e, PREDICTABLE, ww))
        return rows

    def to_tsv(self, path, target=None):
        text = "".join(f"{fmt(t)}\t{fmt(e)}\t{k}\t{fmt(m)}\n" for t, e, k, m in self.realize(path))
        return _emit(text, target)


class PredictableField:
    """A field ``W(t, x_minus, e)`` evaluated with numpy broadcasting.

    ``x_minus`` is the left limit of the forward path.  ``support_hint =
    (lo, hi)`` declares that ``W`` vanishes for marks outside the window.
    ``jump_transform=True`` asserts ``W(t, x, 0) == 0`` (checked on probes).
    A field given ``realized(t, x_minus, e, x_plus)`` is optional rather than
    predictable: that function replaces ``W`` on realised atoms of ``mu``.
    ``atom_term(t, x_minus)`` is a mark-constant term present only at the
    predictable times (atoms of the compensator and the predictable jumps of
    ``mu``), e.g. the ``l 1_K`` part of a field; it never enters the
    absolutely continuous quadrature.
    """

    def __init__(self, fn, support_hint=None, jump_transform=False, name=None, realized=None, atom_term=None):
        self.fn = fn
        self.atom_term = atom_term
        self.support_hint = support_hint
        self.jump_transform = jump_transform
        self.name = name or getattr(fn, "__name__", "W")
        self.realized = realized
        if jump_transform:
            tp, xp = np.meshgrid(np.linspace(0.0, 1.0, 5), np.linspace(-2.0, 2.0, 9))
            z = self(tp.ravel()[:, None], xp.ravel()[:, None], np.zeros((tp.size, 1)))
            if np.any(z != 0):
                raise ValueError(f"field {self.name} is flagged as a jump transform but W(t, x, 0) != 0")

    @property
    def predictable(self):
        return self.realized is None

    def __call__(self, t, x, e):
        e = np.asarray(e, dtype=float)
        out = np.asarray(self.fn(t, x, e), dtype=float)
        out = np.broadcast_to(out, np.broadcast_shapes(np.shape(t), np.shape(x), e.shape)).astype(float)
        if self.support_hint is not None:
            lo, hi = self.support_hint
            out = np.where((e >= lo) & (e <= hi), out, 0.0)
        return out

    def at_atoms(self, t, x_minus, e, x_plus):
        if self.realized is None:
            return self(t, x_minus, e)
        return np.asarray(self.realized(t, x_minus, e, x_plus), dtype=float)

    def at_predictable(self, t, x, e):
        """``W`` plus its atom term, as seen at a predictable time."""
        out = self(t, x, e)
        if self.atom_term is None:
            return out
        return out + np.asarray(self.atom_term(t, x), dtype=float)

    def __repr__(self):
        return f"PredictableField({self.name})"


def constant_field(c, name=None):
    return PredictableField(lambda t, x, e: np.full(np.shape(e), float(c)), name=name or f"const({c})")


# ---------------------------------------------------------------------------
# padded node layout


@dataclass(eq=False)
class NodeBatch:
    """Padded ``(paths, L)`` node arrays shared by all computations.

    Padding nodes repeat the terminal node with ``dt == 0`` and no atoms.
    ``mu_mark`` is NaN where ``mu`` has no atom; ``nu_atom`` flags the
    predictable times of the compensator.
    """

    t: np.ndarray
    x: np.ndarray
    xl: np.ndarray
    dt: np.ndarray
    n_nodes: np.ndarray
    mu_mark: np.ndarray
    mu_pred: np.ndarray
    nu_atom: np.ndarray

    @property
    def shape(self):
        return self.t.shape

    @property
    def valid(self):
        return np.arange(self.t.shape[1])[None, :] < self.n_nodes[:, None]

    @property
    def has_mu(self):
        return ~np.isnan(self.mu_mark)

    def ac_mask(self):
        return self.dt > 0

    @classmethod
    def from_path(cls, path, mu=None, nu=None):
        n = len(path.grid)
        t = path.grid.nodes[None, :].copy()
        dt = np.zeros((1, n))
        dt[0, :-1] = np.diff(path.grid.nodes)
        mark = np.full((1, n), np.nan)
        pred = np.zeros((1, n), dtype=bool)
        if mu is not None and len(mu):
            idx = path.grid.indices(mu.times)
            mark[0, idx] = mu.marks
            pred[0, idx] = mu.predictable
        atom = np.zeros((1, n), dtype=bool)
        if nu is not None and nu.atom_times.size:
            atom[0, path.grid.indices(nu.atom_times)] = True
        return cls(t, path.values[None, :].copy(), path.left_limits[None, :].copy(), dt,
                   np.array([n]), mark, pred, atom)

    def row(self, i):
        n = int(self.n_nodes[i])
        return slice(0, n)


def ac_average(fn, batch, rule="left"):
    """Per-interval averages of ``fn(t, x) -> tuple of arrays`` under the quadrature ``rule``.

    Entry ``[i, k]`` belongs to the interval ``(t_k, t_{k+1}]`` and is zero
    where ``dt == 0``; multiply by ``dt`` and book at ``k + 1``.
    """
    sel = batch.ac_mask()
    left = fn(batch.t[sel], batch.x[sel])
    outs = []
    for v in left:
        a = np.zeros(batch.shape)
        a[sel] = v
        outs.append(a)
    if rule == "left":
        return tuple(outs)
    after = np.zeros(batch.shape, dtype=bool)
    after[:, 1:] = sel[:, :-1]
    # the right end coincides with the next left end unless the path jumps there
    reuse = after & sel & (batch.x == batch.xl)
    extra = after & ~reuse
    right_vals = fn(batch.t[extra], batch.xl[extra]) if extra.any() else [np.empty(0)] * len(outs)
    result = []
    for a, rv in zip(outs, right_vals):
        right = np.zeros(batch.shape)
        right[reuse] = a[reuse]
        right[extra] = rv
        avg = np.zeros(batch.shape)
        avg[:, :-1] = np.where(sel[:, :-1], 0.5 * (a[:, :-1] + right[:, 1:]), 0.0)
        result.append(avg)
    return tuple(result)


def _kernel_stats(kernel, W, t, x, centered=False):
    """Per-row ``mass, sum w W, sum w W^2`` (and ``sum w (W - mean)^2``) over the kernel's quadrature."""
    m = t.shape[0]
    mass = np.zeros(m)
    s1 = np.zeros(m)
    s2 = np.zeros(m)
    sc = np.zeros(m) if centered else None
    if m == 0:
        return mass, s1, s2, sc
    pts, w = kernel.quadrature(t[:1], x[:1])
    step = max(1, _CHUNK // max(1, pts.shape[1]))
    for a in range(0, m, step):
        b = min(m, a + step)
        pts, w = kernel.quadrature(t[a:b], x[a:b])
        vals = W(t[a:b, None], x[a:b, None], pts)
        vals = np.where(w != 0, vals, 0.0)
        wv = w * vals
        mass[a:b] = w.sum(axis=1)
        s1[a:b] = wv.sum(axis=1)
        s2[a:b] = (wv * vals).sum(axis=1)
        if centered:
            d = vals - s1[a:b, None]
            sc[a:b] = (w * d * d).sum(axis=1)
    return mass, s1, s2, sc


class FieldStats(NamedTuple):
    """Kernel integrals of one field along a batch, shared by all compensator-side operations.

    ``ac_s1``/``ac_s2`` are ``(paths, L)`` arrays of ``int W`` and ``int W^2``
    against the rate kernel, averaged over each interval by the compensator's
    rule (zero where ``dt == 0``).  The
    ``at_*`` arrays follow ``batch.t[batch.nu_atom]``.
    """

    ac_s1: np.ndarray
    ac_s2: np.ndarray
    at_mass: np.ndarray
    at_s1: np.ndarray
    at_s2: np.ndarray
    at_sc: np.ndarray


_STATS_CACHE = OrderedDict()
_STATS_CACHE_SIZE = 6


def field_stats(W, nu, batch):
    key = (id(W), id(nu), id(batch))
    hit = _STATS_CACHE.get(key)
    if hit is not None and hit[0] is W and hit[1] is nu and hit[2] is batch:
        _STATS_CACHE.move_to_end(key)
        return hit[3]
    ac_s1 = np.zeros(batch.shape)
    ac_s2 = np.zeros(batch.shape)
    if nu is not None and nu.ac is not None:
        ac_s1, ac_s2 = ac_average(lambda t, x: _kernel_stats(nu.ac, W, t, x)[1:3], batch, nu.ac_rule)
    empty = np.empty(0)
    at = (empty, empty, empty, empty)
    if nu is not None and batch.nu_atom.any():
        mass, s1, s2, sc = _kernel_stats(nu.atom_kernel, W.at_predictable, batch.t[batch.nu_atom],
                                         batch.xl[batch.nu_atom], centered=True)
        if np.any(mass < -K_MASS_TOL) or np.any(mass > 1 + K_MASS_TOL):
            raise ValueError("atom kernel mass outside [0, 1]")
        at = (mass, s1, s2, sc)
    stats = FieldStats(ac_s1, ac_s2, *at)
    _STATS_CACHE[key] = (W, nu, batch, stats)
    while len(_STATS_CACHE) > _STATS_CACHE_SIZE:
        _STATS_CACHE.popitem(last=False)
    return stats


def batch_atom_masses(nu, batch):
    if nu is None or nu.atom_kernel is None or not batch.nu_atom.any():
        return np.empty(0)
    m = np.asarray(nu.atom_kernel.total_mass(batch.t[batch.nu_atom], batch.xl[batch.nu_atom]), dtype=float)
    if np.any(m < -K_MASS_TOL) or np.any(m > 1 + K_MASS_TOL):
        raise ValueError("atom kernel mass outside [0, 1]")
    return m


def _book(per_node):
    """Interval contributions computed at the left node, booked at the right node."""
    out = np.zeros(per_node.shape)
    out[:, 1:] = per_node[:, :-1]
    return out


def integral_increments(W, nu, batch, compensator=True):
    """Node increments of ``W * (mu - nu)`` (or of ``W * mu`` when ``compensator=False``)."""
    inc = np.zeros(batch.shape)
    has = batch.has_mu
    if has.any():
        inc[has] = W.at_atoms(batch.t[has], batch.xl[has], batch.mu_mark[has], batch.x[has])
        pred = has & batch.mu_pred
        if W.atom_term is not None and pred.any():
            inc[pred] += W.atom_term(batch.t[pred], batch.xl[pred])
    if not compensator or nu is None:
        return inc
    st = field_stats(W, nu, batch)
    inc -= _book(batch.dt * st.ac_s1)
    if batch.nu_atom.any():
        inc[batch.nu_atom] -= st.at_s1
    if not np.all(np.isfinite(inc)):
        raise IntegrabilityError(f"non-finite quadrature integrating {W!r} against the compensator")
    return inc


def integral_paths(W, nu, batch, compensator=True):
    return np.cumsum(integral_increments(W, nu, batch, compensator), axis=1)


def _atom_terms(st):
    """At each predictable time: ``sum w (W - hatW)^2 + (1 - mass) hatW^2 1_{J minus K}``."""
    in_j = st.at_mass > 0
    in_k = np.abs(st.at_mass - 1.0) <= K_MASS_TOL
    hat = np.where(in_j, st.at_s1, 0.0)
    corr = np.where(in_j & ~in_k, (1.0 - st.at_mass) * hat * hat, 0.0)
    return np.where(in_j, st.at_sc, 0.0) + corr


def bracket_increments(W, nu, batch):
    inc = np.zeros(batch.shape)
    if nu is None:
        return inc
    st = field_stats(W, nu, batch)
    inc += _book(batch.dt * st.ac_s2)
    if batch.nu_atom.any():
        inc[batch.nu_atom] += _atom_terms(st)
    return inc


def bracket_paths(W, nu, batch):
    """Cumulative ``C(W)`` per path; ``INFINITE_BRACKET`` if any quadrature diverges."""
    with np.errstate(invalid="ignore", over="ignore"):
        inc = bracket_increments(W, nu, batch)
    if not np.all(np.isfinite(inc)):
        return INFINITE_BRACKET
    return np.cumsum(inc, axis=1)


def norm_totals(W, nu, batch):
    """Per-path ``(C(W)_T, int |W|^2 dnu)``; each ``INFINITE_BRACKET`` on divergence."""
    n = batch.shape[0]
    if nu is None:
        return np.zeros(n), np.zeros(n)
    with np.errstate(invalid="ignore", over="ignore"):
        st = field_stats(W, nu, batch)
        ac = (batch.dt * st.ac_s2).sum(axis=1)
        g2 = ac.copy()
        l2 = ac.copy()
        if batch.nu_atom.any():
            rows = np.nonzero(batch.nu_atom)[0]
            np.add.at(g2, rows, _atom_terms(st))
            np.add.at(l2, rows, st.at_s2)
    if not (np.all(np.isfinite(g2)) and np.all(np.isfinite(l2))):
        return INFINITE_BRACKET, INFINITE_BRACKET
    return g2, l2


class KernelDecomposition(NamedTuple):
    l: np.ndarray            # (paths, L): kernel mean at K-nodes, NaN elsewhere
    residual_l2: np.ndarray  # (paths,)
    ac_l2: np.ndarray        # part of the residual carried by nu^c
    k_residual: np.ndarray   # part carried by K-atoms after removing l
    jk_l2: np.ndarray        # part carried by atoms in J minus K


def kernel_decompose_batch(W, nu, batch):
    n = batch.shape[0]
    l = np.full(batch.shape, np.nan)
    ac_part = np.zeros(n)
    k_part = np.zeros(n)
    jk_part = np.zeros(n)
    if nu is None:
        return KernelDecomposition(l, ac_part, ac_part, k_part, jk_part)
    st = field_stats(W, nu, batch)
    ac_part = (batch.dt * st.ac_s2).sum(axis=1)
    if batch.nu_atom.any():
        in_k = np.abs(st.at_mass - 1.0) <= K_MASS_TOL
        in_jk = (st.at_mass > 0) & ~in_k
        rows = np.nonzero(batch.nu_atom)[0]
        l[batch.nu_atom] = np.where(in_k, st.at_s1, np.nan)
        np.add.at(k_part, rows, np.where(in_k, st.at_sc, 0.0))
        np.add.at(jk_part, rows, np.where(in_jk, st.at_s2, 0.0))
    return KernelDecomposition(l, ac_part + k_part + jk_part, ac_part, k_part, jk_part)


# ---------------------------------------------------------------------------
# single-path operations


def build_jump_measure(path, jump_log):
    """Jump measure ``mu^X`` from a simulator's jump log ``[(time, size, kind), ...]``."""
    atoms = []
    for t, size, kind in jump_log:
        path.grid.index(t)  # raises for non-node times
        if size == 0:
            raise ValueError(f"zero jump size logged at t={t}")
        if kind not in KINDS:
            raise ValueError(f"unknown atom kind {kind!r}")
        atoms.append((float(path.grid.nodes[path.grid.index(t)]), float(size), kind))
    return MarkedPointMeasure.from_atoms(atoms)


def jump_measure_of_path(path, predictable_times=()):
    """``mu^X`` read off the path's own jumps; atoms at ``predictable_times`` are tagged predictable."""
    jumps = path.jumps
    idx = np.flatnonzero(jumps != 0)
    pred = set(path.grid.indices(predictable_times).tolist()) if len(predictable_times) else set()
    log = [(path.grid.nodes[i], jumps[i], PREDICTABLE if i in pred else INACCESSIBLE) for i in idx]
    return build_jump_measure(path, log)


def stochastic_integral(W, mu, nu, path):
    """Grid path of ``int_(0,t] W d(mu - nu)``."""
    batch = NodeBatch.from_path(path, mu, nu)
    return GridPath(path.grid, integral_paths(W, nu, batch)[0])


class HatTilde(NamedTuple):
    hat: object
    tilde: object

    @property
    def defined(self):
        return not is_divergent(self.hat)


def hat_tilde(W, mu, nu, path, t):
    """``(hat W_t, tilde W_t)``; both ``UNDEFINED`` when the kernel integral diverges."""
    i = path.grid.index(t)
    tt = np.array([path.grid.nodes[i]])
    xm = np.array([path.left_limits[i]])
    hat = 0.0
    if nu is not None and nu.atom_times.size and np.any(np.abs(nu.atom_times - tt[0]) <= NODE_TOL):
        mass, s1, _, _ = _kernel_stats(nu.atom_kernel, W, tt, xm)
        if not np.isfinite(s1[0]):
            return HatTilde(UNDEFINED, UNDEFINED)
        hat = float(s1[0]) if mass[0] > 0 else 0.0
    atom_value = 0.0
    if mu is not None and len(mu):
        hit = np.flatnonzero(np.abs(mu.times - tt[0]) <= NODE_TOL)
        if hit.size:
            atom_value = float(W.at_atoms(tt, xm, mu.marks[hit], path.values[i:i + 1])[0])
    return HatTilde(hat, atom_value - hat)


def bracket_C(W, nu, path):
    """Grid path of the predictable bracket ``C(W)``, or ``INFINITE_BRACKET``."""
    out = bracket_paths(W, nu, NodeBatch.from_path(path, None, nu))
    if is_divergent(out):
        return out
    return GridPath(path.grid, out[0])


def norms(W, nu, path):
    """Per-path ``(C(W)_T, int |W|^2 dnu)``: the G^2 and L^2 contributions."""
    g2, l2 = norm_totals(W, nu, NodeBatch.from_path(path, None, nu))
    if is_divergent(g2):
        return g2, l2
    return float(g2[0]), float(l2[0])


class Supports(NamedTuple):
    J: np.ndarray
    K: np.ndarray
    compliant: bool


def classify_supports(nu, path):
    """Predictable times carrying compensator mass (``J``) and those with mass one (``K``)."""
    if nu is None or not nu.atom_times.size:
        return Supports(np.empty(0), np.empty(0), True)
    m = nu.atom_masses(path)
    J = nu.atom_times[m > 0]
    K = nu.atom_times[np.abs(m - 1.0) <= K_MASS_TOL]
    return Supports(J, K, bool(J.size == K.size))


def kernel_decompose(W, nu, path):
    """``({t: l_t} on K, residual)`` with ``l_t = hat W_t`` and residual ``||W - l 1_K||^2`` under ``nu``."""
    d = kernel_decompose_batch(W, nu, NodeBatch.from_path(path, None, nu))
    row = d.l[0]
    keep = ~np.isnan(row)
    l = {float(t): float(v) for t, v in zip(path.grid.nodes[keep], row[keep])}
    return l, float(d.residual_l2[0])


class IntegrabilityReport(NamedTuple):
    small_jumps: np.ndarray   # sum (|x| ^ |x|^2) per path
    alpha_jumps: np.ndarray   # sum (|x| ^ |x|^(1+alpha)) per path
    taylor_tail: np.ndarray   # sum |v(X- + x) - v(X-) - x dv(X-)| 1_{|x|>1} per path
    alpha: float

    def summary(self):
        out = {}
        for name in ("small_jumps", "alpha_jumps", "taylor_tail"):
            a = getattr(self, name)
            out[name] = {"mean": float(a.mean()) if a.size else 0.0, "max": float(a.max()) if a.size else 0.0}
        return out


def check_integrability(batch, v, dv, alpha):
    """Magnitudes of the three truncated jump sums along each path of ``batch``.

    Jumps are read from the paths themselves (``x - x_left``), i.e. from ``mu^X``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    jumps = np.where(batch.valid, batch.x - batch.xl, 0.0)
    a = np.abs(jumps)
    s1 = np.minimum(a, a * a).sum(axis=1)
    s2 = np.minimum(a, a ** (1.0 + alpha)).sum(axis=1)
    big = a > 1
    tail = np.zeros(batch.shape)
    if big.any():
        t, xm, dx = batch.t[big], batch.xl[big], jumps[big]
        tail[big] = np.abs(v(t, xm + dx) - v(t, xm) - dx * dv(t, xm))
    return IntegrabilityReport(s1, s2, tail.sum(axis=1), float(alpha))


# ---------------------------------------------------------------------------
# formatting helpers


def fmt(x):
    """Fixed 17-significant-digit float formatting (round-trips exactly)."""
    x = float(x)
    if x == 0.0:
        return "0"
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def _emit(text, target):
    if target is None:
        return text
    Path(target).write_text(text, encoding="utf-8")
    return text


def _read(source):
    if isinstance(source, Path) or (isinstance(source, str) and source and "\n" not in source
                                    and Path(source).is_file()):
        return Path(source).read_text(encoding="utf-8")
    return str(source)
