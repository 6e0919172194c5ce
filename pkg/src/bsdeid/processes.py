"""Forward simulators: piecewise deterministic Markov processes on [0, 1] and
jump-diffusions driven by a Brownian motion and an integer-valued random
measure with (possibly) predictable atoms.

Both simulators are vectorised over an ensemble of paths.  Each path draws
from its own random substream, so ``simulate_*(model, T, seed)`` returns
exactly path 0 of any ensemble with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from typing import NamedTuple

from .kernels import ByTime, Dirac, MarkKernel, PushForward, RateKernel, Scaled, sample_marks
from .measures import (
    INACCESSIBLE,
    NODE_TOL,
    PREDICTABLE,
    CompensatorSpec,
    GridPath,
    MarkedPointMeasure,
    NodeBatch,
    PredictableField,
    TimeGrid,
    integral_paths,
    K_MASS_TOL,
)
from .streams import PathStreams

SNAP_TOL = 1e-11
HIT_TOL = 1e-12
BOUNDARY_EPS = 1e-12
EXPLOSION = 1e8

BASE, THINNED, BOUNDARY = 0, 1, 2


class SimulationFault(RuntimeError):
    """The simulator detected an inconsistency (escape, explosion, too many jumps)."""


def _vec(f, x):
    return np.broadcast_to(np.asarray(f(x), dtype=float), np.shape(x)).astype(float)


def _vec_tx(f, t, x):
    return np.broadcast_to(np.asarray(f(t, x), dtype=float), np.broadcast_shapes(np.shape(t), np.shape(x))).astype(float)


# ---------------------------------------------------------------------------
# models


@dataclass(eq=False)
class PDMPModel:
    """PDMP on [0, 1] with flow ``dx/dt = h(x)``, jump rate ``lam`` and jump-size kernel ``Q``.

    ``Q`` is a :class:`MarkKernel` evaluated at ``(t, X_{t-})``; marks are jump
    sizes.  At the boundary the jump is forced and its size drawn from
    ``Q(boundary point, .)``.
    """

    h: object
    lam: object
    Q: MarkKernel
    x0: float
    lam_max: float | None = None
    max_jumps: int = 10_000
    ode_tol: float = 1e-11
    name: str = "pdmp"

    def __post_init__(self):
        if not 0.0 <= self.x0 <= 1.0:
            raise ValueError("x0 must lie in [0, 1]")
        grid = np.linspace(0.0, 1.0, 2049)[1:-1]
        peak = float(np.max(np.abs(_vec(self.lam, grid))))
        if self.lam_max is None:
            self.lam_max = 1.01 * peak
        elif self.lam_max < peak:
            raise ValueError("lam_max is below the rate on (0, 1)")
        if np.any(_vec(self.lam, grid) < 0):
            raise ValueError("negative jump rate")

    def rate(self, t, x):
        x = np.asarray(x, dtype=float)
        inside = (x > 0.0) & (x < 1.0)
        return np.where(inside, _vec(self.lam, np.clip(x, 0.0, 1.0)), 0.0)

    def flow_rate(self, t, x):
        """Rate seen along the flow: at a boundary point, the limit from inside ``(0, 1)``.

        The path touches the boundary only at isolated instants, so this
        changes ``lam(X_{s-}) ds`` on a null set; it gives the trapezoid rule
        the correct one-sided value at interval ends that are boundary hits.
        """
        x = np.asarray(x, dtype=float)
        return _vec(self.lam, np.clip(x, BOUNDARY_EPS, 1.0 - BOUNDARY_EPS))

    def compensator(self, atom_times=()):
        """``(lam(X-) ds + dp*) Q(X-, dx)``; atom times are the boundary hits of a path.

        Between nodes the state follows the known flow, so the continuous part
        uses the trapezoid rule.
        """
        return CompensatorSpec(RateKernel(self.flow_rate, self.Q), np.asarray(atom_times, dtype=float), self.Q,
                               ac_rule="trapezoid")


@dataclass(eq=False)
class JumpDiffusionModel:
    """``X = x0 + int b dC + int sigma dN + int gamma d(mu - nu)``.

    ``N`` is a Brownian motion; ``C_t = t + sum of clock_jumps``.  The driving
    measure has inaccessible atoms at rate ``rate(t)`` with marks from
    ``marks`` and predictable atoms at ``atom_times`` with mark law
    ``atom_kernel`` (mass one).  ``script`` replaces the random inaccessible
    atoms by a fixed list of ``(time, mark)``.
    """

    b: object
    sigma: object
    gamma: object
    x0: float
    rate: object = 0.0
    marks: MarkKernel | None = None
    rate_max: float | None = None
    atom_times: tuple = ()
    atom_kernel: MarkKernel | None = None
    clock_jumps: dict = field(default_factory=dict)
    script: tuple | None = None
    name: str = "jumpdiff"

    def __post_init__(self):
        self.atom_times = tuple(sorted(float(a) for a in self.atom_times))
        self.clock_jumps = {float(k): float(v) for k, v in dict(self.clock_jumps).items()}
        if callable(self.rate):
            self._rate = self.rate
        else:
            r = float(self.rate)
            self._rate = lambda t: np.full(np.shape(t), r)
            if self.rate_max is None:
                self.rate_max = r
        if self.rate_max is None:
            probe = np.linspace(0.0, 1.0, 1025)
            self.rate_max = 1.01 * float(np.max(self._rate(probe)))
        if self.rate_max > 0 and self.marks is None:
            raise ValueError("a positive jump rate needs a mark kernel")
        if self.atom_times and self.atom_kernel is None:
            raise ValueError("predictable atom times need an atom kernel")
        if self.atom_times:
            if self.atom_times[0] <= 0:
                raise ValueError("predictable atom times must be positive")
            masses = self.atom_kernel.total_mass(np.array(self.atom_times), np.zeros(len(self.atom_times)))
            if np.any(np.abs(masses - 1.0) > K_MASS_TOL):
                raise ValueError("driving-measure atoms must carry mass one (J = K)")
        for tc, dc in self.clock_jumps.items():
            if dc < 0:
                raise ValueError("clock jumps must be nonnegative")
            if not any(abs(tc - a) <= NODE_TOL for a in self.atom_times):
                raise ValueError(f"clock jump at {tc} is not a predictable atom time of the driving measure")
        self._check_gamma_on_K()

    def _check_gamma_on_K(self):
        xs = np.linspace(-5.0, 5.0, 41)
        for a in self.atom_times:
            pts, _ = self.atom_kernel.quadrature(np.full(xs.size, a), xs)
            g = _vec_gamma(self.gamma, np.full(pts.shape, a), np.broadcast_to(xs[:, None], pts.shape), pts)
            if np.any(g != 0):
                raise ValueError(f"gamma does not vanish at the predictable time {a}")

    def driving_rate(self, t, x=None):
        return np.broadcast_to(np.asarray(self._rate(np.asarray(t, dtype=float)), dtype=float), np.shape(t)).astype(float)

    def compensator(self):
        ac = RateKernel(self.driving_rate, self.marks) if self.marks is not None else None
        return CompensatorSpec(ac, np.array(self.atom_times), self.atom_kernel)

    def clock_jump(self, t):
        out = np.zeros(np.shape(t))
        for tc, dc in self.clock_jumps.items():
            out = np.where(np.abs(np.asarray(t) - tc) <= NODE_TOL, dc, out)
        return out

    def gamma_field(self):
        return PredictableField(lambda t, x, e: _vec_gamma(self.gamma, t, x, e), name="gamma")

    def jump_compensator(self):
        """Compensator of ``mu^X``: image of ``nu^c`` under gamma plus a Dirac at each clock jump."""
        ac = None
        if self.marks is not None:
            ac = PushForward(RateKernel(self.driving_rate, self.marks),
                             lambda t, x, e: _vec_gamma(self.gamma, t, x, e))
        times = np.array(sorted(self.clock_jumps))
        if not times.size:
            return CompensatorSpec(ac)
        return CompensatorSpec(ac, times, _ClockJumpKernel(self))


def _vec_gamma(gamma, t, x, e):
    shape = np.broadcast_shapes(np.shape(t), np.shape(x), np.shape(e))
    return np.broadcast_to(np.asarray(gamma(t, x, e), dtype=float), shape).astype(float)


class _ClockJumpKernel(MarkKernel):
    """Unit mass at the predictable jump ``b(t, x) dC_t`` of the forward path."""

    def __init__(self, model):
        self.model = model

    def quadrature(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        size = _vec_tx(self.model.b, t, x) * self.model.clock_jump(t)
        return size[:, None], np.ones((size.size, 1))


# ---------------------------------------------------------------------------
# ensembles and scenarios


@dataclass(eq=False)
class SimulatedScenario:
    path: GridPath
    measure: MarkedPointMeasure
    compensator: CompensatorSpec
    seed: int
    model: object = None
    p_star: GridPath | None = None
    brownian: GridPath | None = None
    clock: GridPath | None = None
    decomposition: tuple | None = None
    path_index: int = 0

    @property
    def grid(self):
        return self.path.grid

    def manifest(self):
        events = [{"t": t, "mark": e, "kind": k} for t, e, k in self.measure.atoms()]
        return {
            "model": getattr(self.model, "name", type(self.model).__name__),
            "seed": int(self.seed),
            "path_index": int(self.path_index),
            "horizon": float(self.grid.horizon),
            "nodes": int(len(self.grid)),
            "events": events,
            "terminal": float(self.path.terminal),
        }


@dataclass(eq=False)
class Ensemble:
    """Simulated paths in the padded layout of :class:`NodeBatch`.

    ``batch`` carries the driving measure (``mu^X`` itself for a PDMP).
    ``base_cols[i, k]`` is the column of base node ``k`` in row ``i``.
    """

    model: object
    horizon: float
    seed: int
    batch: NodeBatch
    compensator: CompensatorSpec
    base_nodes: np.ndarray
    base_cols: np.ndarray
    p_star: np.ndarray | None = None
    brownian: np.ndarray | None = None
    clock: np.ndarray | None = None
    first: int = 0

    def __len__(self):
        return self.batch.shape[0]

    @property
    def is_pdmp(self):
        return isinstance(self.model, PDMPModel)

    def at_base(self, arr):
        rows = np.arange(len(self))[:, None]
        return arr[rows, self.base_cols]

    @property
    def base_values(self):
        return self.at_base(self.batch.x)

    def jump_batch(self):
        """Node batch carrying ``mu^X`` read off the simulated jumps."""
        b = self.batch
        if self.is_pdmp:
            return b
        jumps = np.where(b.valid, b.x - b.xl, 0.0)
        mark = np.where(jumps != 0, jumps, np.nan)
        pred = (jumps != 0) & b.nu_atom & (self.model.clock_jump(b.t) > 0)
        atom = b.nu_atom & (self.model.clock_jump(b.t) > 0)
        return NodeBatch(b.t, b.x, b.xl, b.dt, b.n_nodes, mark, pred, atom)

    def jump_compensator(self):
        if self.is_pdmp:
            return self.compensator
        return self.model.jump_compensator()

    def scenario(self, i):
        b = self.batch
        n = int(b.n_nodes[i])
        t = b.t[i, :n]
        base_set = set(self.base_cols[i].tolist())
        extra = np.array([t[k] for k in range(n) if k not in base_set])
        grid = TimeGrid(self.horizon, t.copy(), extra)
        path = GridPath(grid, b.x[i, :n].copy(), b.xl[i, :n].copy())
        has = ~np.isnan(b.mu_mark[i, :n])
        mu = MarkedPointMeasure(t[has], b.mu_mark[i, :n][has], b.mu_pred[i, :n][has])
        atoms = t[b.nu_atom[i, :n]]
        nu = self.compensator.with_atoms(atoms)
        sc = SimulatedScenario(path, mu, nu, self.seed, self.model, path_index=self.first + i)
        if self.p_star is not None:
            sc.p_star = GridPath(grid, self.p_star[i, :n].astype(float))
        if self.brownian is not None:
            sc.brownian = GridPath(grid, self.brownian[i, :n].copy())
        if self.clock is not None:
            sc.clock = GridPath(grid, self.clock[i, :n].copy(), self.clock_left(i)[:n])
        return sc

    def clock_left(self, i):
        return self.clock[i] - self.model.clock_jump(self.batch.t[i])


def _layout(rec_path, rec_t, fields, n_paths):
    """Sort flat node records by (path, time) and pad them into ``(paths, L)`` arrays."""
    order = np.lexsort((rec_t, rec_path))
    rec_path = rec_path[order]
    counts = np.bincount(rec_path, minlength=n_paths)
    L = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    col = np.arange(rec_path.size) - starts[rec_path]
    last = starts + counts - 1
    out = {}
    for name, vals in dict(fields, t=rec_t).items():
        vals = vals[order]
        arr = np.empty((n_paths, L), dtype=vals.dtype)
        arr[:] = vals[last][:, None]
        arr[rec_path, col] = vals
        out[name] = arr
    return out, counts


def _finish_dt(t, counts):
    dt = np.zeros_like(t)
    dt[:, :-1] = t[:, 1:] - t[:, :-1]
    valid_next = np.arange(t.shape[1])[None, :] < (counts[:, None] - 1)
    return np.where(valid_next, dt, 0.0)


def _snap(times, base):
    """Snap event times lying within ``SNAP_TOL`` of a base node onto it; return (times, base index or -1)."""
    j = np.clip(np.searchsorted(base, times), 1, base.size - 1)
    lo, hi = base[j - 1], base[j]
    near_lo = np.abs(times - lo) <= SNAP_TOL
    near_hi = np.abs(times - hi) <= SNAP_TOL
    idx = np.where(near_hi, j, np.where(near_lo, j - 1, -1))
    out = np.where(idx >= 0, base[np.maximum(idx, 0)], times)
    return out, idx


# ---------------------------------------------------------------------------
# PDMP simulation


def _rk4(h, x, dt):
    f = lambda y: _vec(h, np.clip(y, 0.0, 1.0))
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_pdmp_ensemble(model, T, seed, n_paths, steps=50, first=0):
    """Simulate ``n_paths`` PDMP paths on ``[0, T]`` with a uniform base grid of ``steps`` intervals."""
    base = TimeGrid.uniform(T, steps).nodes
    nb = base.size
    streams = PathStreams(seed, n_paths, first)
    n = n_paths
    t = np.zeros(n)
    x = np.full(n, float(model.x0))
    dt_base = base[1] - base[0]
    hstep = np.full(n, dt_base)
    nxt = np.ones(n, dtype=np.int64)  # index of next base node
    cand = np.full(n, np.inf)
    if model.lam_max > 0:
        cand = streams.exponentials(np.arange(n), model.lam_max)
    jumps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    recs = {"path": [np.arange(n)], "t": [np.zeros(n)], "xl": [x.copy()], "x": [x.copy()],
            "kind": [np.full(n, BASE, dtype=np.int8)], "mark": [np.full(n, np.nan)]}

    def record(rows, tt, xl, xx, kind, mark=None):
        recs["path"].append(rows)
        recs["t"].append(tt.copy())
        recs["xl"].append(xl.copy())
        recs["x"].append(xx.copy())
        recs["kind"].append(np.full(rows.size, kind, dtype=np.int8))
        recs["mark"].append(np.full(rows.size, np.nan) if mark is None else mark.copy())

    while active.any():
        a = np.flatnonzero(active)
        stop = np.minimum(base[nxt[a]], cand[a])
        step = np.minimum(hstep[a], stop - t[a])
        xa = x[a]
        full = _rk4(model.h, xa, step)
        half = _rk4(model.h, _rk4(model.h, xa, 0.5 * step), 0.5 * step)
        err = np.abs(half - full)
        ok = err <= model.ode_tol
        rej = a[~ok]
        hstep[rej] = 0.5 * step[~ok]
        if np.any(hstep[rej] < 1e-14):
            raise SimulationFault("ODE step size underflow")
        a, step, stop, xn, err = a[ok], step[ok], stop[ok], half[ok], err[ok]
        if a.size == 0:
            continue
        reached = step >= stop - t[a]
        hstep[a] = np.where(err < model.ode_tol / 32, np.minimum(2.0 * hstep[a], dt_base), hstep[a])

        cross = (xn <= 0.0) | (xn >= 1.0)
        if cross.any():
            c = a[cross]
            x_start = x[c]
            lo = np.zeros(c.size)
            hi = step[cross].copy()
            while np.any(hi - lo > HIT_TOL):
                mid = 0.5 * (lo + hi)
                xm = _rk4(model.h, x_start, mid)
                inside = (xm > 0.0) & (xm < 1.0)
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
            if np.any(hi <= 0.0):
                raise SimulationFault("flow leaves [0, 1] immediately")
            xb = _rk4(model.h, x_start, hi)
            bpt = np.where(xb >= 0.5, 1.0, 0.0)
            th = t[c] + hi
            e = sample_marks(model.Q, th, bpt, streams.draw(c))
            post = bpt + e
            if np.any((post <= 0.0) | (post >= 1.0)):
                raise SimulationFault("boundary jump does not land inside (0, 1)")
            record(c, th, bpt, post, BOUNDARY, e)
            t[c] = th
            x[c] = post
            jumps[c] += 1

        go = a[~cross]
        if go.size:
            rch = reached[~cross]
            st = stop[~cross]
            t[go] = np.where(rch, st, t[go] + step[~cross])
            x[go] = xn[~cross]
            hit = go[rch]
            # thinning candidate reached
            th = hit[cand[hit] <= t[hit]]
            if th.size:
                r = model.rate(t[th], x[th])
                if np.any(r > model.lam_max * (1 + 1e-12)):
                    raise SimulationFault("jump rate exceeds its declared bound")
                u = streams.uniforms(th, 1)[:, 0]
                acc = th[u * model.lam_max < r]
                if acc.size:
                    e = sample_marks(model.Q, t[acc], x[acc], streams.draw(acc))
                    post = x[acc] + e
                    if np.any((post < -HIT_TOL) | (post > 1 + HIT_TOL)):
                        raise SimulationFault("jump leaves [0, 1]")
                    post = np.clip(post, 0.0, 1.0)
                    record(acc, t[acc], x[acc], post, THINNED, e)
                    x[acc] = post
                    jumps[acc] += 1
                cand[th] = t[th] + streams.exponentials(th, model.lam_max)
            # base node reached
            bn = hit[base[nxt[hit]] <= t[hit]]
            if bn.size:
                record(bn, t[bn], x[bn], x[bn], BASE)
                nxt[bn] += 1
                done = bn[nxt[bn] >= nb]
                active[done] = False
        if np.any(jumps > model.max_jumps):
            raise SimulationFault(f"more than {model.max_jumps} jumps on a path")

    cat = {k: np.concatenate(v) for k, v in recs.items()}
    return _pdmp_ensemble(model, T, seed, cat, base, n_paths, first)


def _pdmp_ensemble(model, T, seed, cat, base, n, first):
    kind = cat["kind"]
    ev = kind != BASE
    snapped, idx = _snap(cat["t"][ev], base)
    t_all = cat["t"].copy()
    t_all[ev] = snapped
    on_base = np.zeros(kind.size, dtype=bool)
    on_base[kind == BASE] = True
    ev_idx = np.flatnonzero(ev)
    on_base[ev_idx[idx >= 0]] = True
    # drop base records whose node is taken by an event
    taken = cat["path"][ev_idx[idx >= 0]] * base.size + idx[idx >= 0]
    base_rows = np.flatnonzero(kind == BASE)
    keys = cat["path"][base_rows] * base.size + np.searchsorted(base, t_all[base_rows])
    keep = np.ones(kind.size, dtype=bool)
    keep[base_rows[np.isin(keys, taken)]] = False
    sel = lambda a: a[keep]
    jump = np.where(ev, cat["x"] - cat["xl"], np.nan)
    fields = {"x": sel(cat["x"]), "xl": sel(cat["xl"]), "kind": sel(kind), "mark": sel(jump),
              "base": sel(on_base)}
    out, counts = _layout(sel(cat["path"]), sel(t_all), fields, n)
    tt = out["t"]
    valid = np.arange(tt.shape[1])[None, :] < counts[:, None]
    if np.any(np.diff(tt, axis=1)[valid[:, 1:]] <= 0):
        raise SimulationFault("two events at the same time")
    is_base = out["base"] & valid
    if not np.all(is_base.sum(axis=1) == base.size):
        raise SimulationFault("base grid nodes lost while merging events")
    base_cols = np.nonzero(is_base)[1].reshape(n, base.size)
    kind = np.where(valid, out["kind"], BASE)
    mark = np.where(valid & (kind != BASE), out["mark"], np.nan)
    pred = kind == BOUNDARY
    batch = NodeBatch(tt, out["x"], np.where(valid, out["xl"], out["x"]), _finish_dt(tt, counts), counts,
                      mark, pred, pred.copy())
    if np.any((batch.x < 0) | (batch.x > 1)):
        raise SimulationFault("PDMP path left [0, 1]")
    p_star = np.cumsum(pred, axis=1)
    return Ensemble(model, float(T), int(seed), batch, model.compensator(), base, base_cols, p_star=p_star,
                    first=first)


def simulate_pdmp(model, T, seed, steps=50):
    return simulate_pdmp_ensemble(model, T, seed, 1, steps).scenario(0)


def pdmp_compensator(model, scenario):
    """Realised compensator of ``mu^X`` along a simulated PDMP scenario."""
    if scenario.model is not model:
        raise ValueError("scenario was not simulated from this model")
    hits = scenario.measure.times[scenario.measure.predictable]
    return model.compensator(hits)


# ---------------------------------------------------------------------------
# jump-diffusion simulation


def _driving_events(model, T, streams, n):
    """Inaccessible atoms of the driving measure: ``(path, time, mark)`` arrays."""
    if model.script is not None:
        sc = sorted((float(a), float(b)) for a, b in model.script)
        if any(not 0 < s <= T for s, _ in sc):
            raise ValueError("scripted event times must lie in (0, T]")
        k = len(sc)
        p = np.repeat(np.arange(n), k)
        tt = np.tile(np.array([s for s, _ in sc]), n)
        ee = np.tile(np.array([e for _, e in sc]), n)
        return p, tt, ee
    if not model.rate_max or model.rate_max <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    paths, times = [], []
    s = np.zeros(n)
    live = np.arange(n)
    while live.size:
        s[live] += streams.exponentials(live, model.rate_max)
        live = live[s[live] <= T]
        if not live.size:
            break
        u = streams.uniforms(live, 1)[:, 0]
        r = model.driving_rate(s[live])
        if np.any(r > model.rate_max * (1 + 1e-12)):
            raise SimulationFault("driving rate exceeds its bound")
        acc = live[u * model.rate_max < r]
        paths.append(acc)
        times.append(s[acc].copy())
    if not paths:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    p = np.concatenate(paths)
    tt = np.concatenate(times)
    order = np.lexsort((tt, p))
    p, tt = p[order], tt[order]
    # marks drawn path by path in time order (one substream per path)
    ee = np.empty(tt.size)
    starts = np.flatnonzero(np.r_[True, p[1:] != p[:-1]])
    ends = np.r_[starts[1:], p.size]
    k = 0
    while True:
        cur = starts + k
        m = cur < ends
        if not m.any():
            break
        cur = cur[m]
        ee[cur] = sample_marks(model.marks, tt[cur], np.zeros(cur.size), streams.draw(p[cur]))
        k += 1
    return p, tt, ee


def simulate_jumpdiff_ensemble(model, T, seed, n_paths, steps=50, first=0):
    """Euler scheme on the base grid refined by all atom times of the driving measure."""
    n = n_paths
    streams = PathStreams(seed, n, first)
    atoms = np.array([a for a in model.atom_times if a <= T])
    base = TimeGrid.uniform(T, steps, atoms).nodes
    nb = base.size
    ep, et, ee = _driving_events(model, T, streams, n)
    et, idx = _snap(et, base)
    atom_cols = np.array([int(np.searchsorted(base, a)) for a in atoms], dtype=np.int64)
    if np.any(np.isin(idx, atom_cols)):
        raise SimulationFault("inaccessible atom coincides with a predictable time")

    base_mark = np.full((n, nb), np.nan)
    base_pred = np.zeros((n, nb), dtype=bool)
    for j, a in zip(atom_cols, atoms):
        kern = model.atom_kernel.lookup(a) if isinstance(model.atom_kernel, ByTime) else model.atom_kernel
        base_mark[:, j] = sample_marks(kern, np.full(n, a), np.zeros(n), streams.draw(np.arange(n)))
        base_pred[:, j] = True
    on = idx >= 0
    base_mark[ep[on], idx[on]] = ee[on]
    off = ~on
    rec_path = np.concatenate([np.repeat(np.arange(n), nb), ep[off]])
    rec_t = np.concatenate([np.tile(base, n), et[off]])
    fields = {
        "mark": np.concatenate([base_mark.ravel(), ee[off]]),
        "pred": np.concatenate([base_pred.ravel(), np.zeros(int(off.sum()), dtype=bool)]),
        "base": np.concatenate([np.ones(n * nb, dtype=bool), np.zeros(int(off.sum()), dtype=bool)]),
        "atom": np.concatenate([np.tile(np.isin(np.arange(nb), atom_cols), n), np.zeros(int(off.sum()), dtype=bool)]),
    }
    out, counts = _layout(rec_path, rec_t, fields, n)
    tt = out["t"]
    valid = np.arange(tt.shape[1])[None, :] < counts[:, None]
    if np.any(np.diff(tt, axis=1)[valid[:, 1:]] <= 0):
        raise SimulationFault("two atoms at the same time")
    dt = _finish_dt(tt, counts)
    mark = np.where(valid, out["mark"], np.nan)
    pred = out["pred"] & valid
    atom = out["atom"] & valid
    base_cols = np.nonzero(out["base"] & valid)[1].reshape(n, nb)

    L = tt.shape[1]
    X = np.empty((n, L))
    XL = np.empty((n, L))
    W = np.zeros((n, L))
    X[:, 0] = XL[:, 0] = model.x0
    nu = model.compensator()
    dC_jump = model.clock_jump(tt)
    for k in range(L - 1):
        live = np.flatnonzero(dt[:, k] > 0)
        xk = X[:, k]
        xl = xk.copy()
        dW = np.zeros(n)
        if live.size:
            tk, xv, h = tt[live, k], xk[live], dt[live, k]
            dW[live] = np.sqrt(h) * streams.normals(live)
            comp = np.zeros(live.size)
            if nu.ac is not None:
                pts, w = nu.ac.quadrature(tk, xv)
                comp = h * (w * _vec_gamma(model.gamma, tk[:, None], xv[:, None], pts)).sum(axis=1)
            xl[live] = xv + _vec_tx(model.b, tk, xv) * h + _vec_tx(model.sigma, tk, xv) * dW[live] - comp
        W[:, k + 1] = W[:, k] + dW
        t1 = tt[:, k + 1]
        jump = np.zeros(n)
        has = ~np.isnan(mark[:, k + 1])
        if has.any():
            jump[has] = _vec_gamma(model.gamma, t1[has], xl[has], mark[has, k + 1])
        cj = dC_jump[:, k + 1] > 0
        if cj.any():
            jump[cj] += _vec_tx(model.b, t1[cj], xl[cj]) * dC_jump[cj, k + 1]
        pad = ~valid[:, k + 1]
        xl[pad] = xk[pad]
        jump[pad] = 0.0
        XL[:, k + 1] = xl
        X[:, k + 1] = xl + jump
        if not np.all(np.abs(X[:, k + 1]) <= EXPLOSION):
            raise SimulationFault("jump-diffusion path exploded (|X| > 1e8)")
    batch = NodeBatch(tt, X, XL, dt, counts, mark, pred, atom)
    clock = tt + np.cumsum(np.where(valid, dC_jump, 0.0), axis=1)
    return Ensemble(model, float(T), int(seed), batch, nu, base, base_cols, brownian=W, clock=clock, first=first)


def simulate_jumpdiff(model, T, seed, steps=50):
    return simulate_jumpdiff_ensemble(model, T, seed, 1, steps).scenario(0)


# ---------------------------------------------------------------------------
# decomposition and measure transfer


DECOMPOSITION_TOL = 1e-9


def decompose_batch(ensemble):
    """``(Xi, Xp)`` node arrays of the jump-diffusion decomposition."""
    if ensemble.is_pdmp:
        raise ValueError("the decomposition is defined for jump-diffusions; PDMP paths use mu = mu^X directly")
    model = ensemble.model
    b = ensemble.batch
    xi = integral_paths(model.gamma_field(), ensemble.compensator, b)
    sel = b.ac_mask()
    inc = np.zeros(b.shape)
    drift = np.zeros(b.shape)
    drift[sel] = _vec_tx(model.b, b.t[sel], b.x[sel]) * b.dt[sel]
    inc[:, 1:] += drift[:, :-1]
    dW = np.zeros(b.shape)
    dW[:, 1:] = np.diff(ensemble.brownian, axis=1)
    vol = np.zeros(b.shape)
    vol[sel] = _vec_tx(model.sigma, b.t[sel], b.x[sel])
    inc[:, 1:] += vol[:, :-1] * dW[:, 1:]
    dc = model.clock_jump(b.t)
    cj = (dc > 0) & b.valid
    inc[cj] += _vec_tx(model.b, b.t[cj], b.xl[cj]) * dc[cj]
    xp = model.x0 + np.cumsum(inc, axis=1)
    resid = np.abs(b.x - xi - xp)
    if np.any(resid[b.valid] > DECOMPOSITION_TOL):
        raise SimulationFault(f"X != Xi + Xp (max residual {resid[b.valid].max():.3e})")
    return xi, xp


def decompose_path(model, scenario):
    """``(Xi, Xp)`` grid paths of a simulated jump-diffusion scenario."""
    if isinstance(model, PDMPModel) or scenario.brownian is None:
        raise ValueError("the decomposition needs a jump-diffusion scenario with its Brownian path")
    if scenario.model is not model:
        raise ValueError("scenario was not simulated from this model")
    ens = _single(scenario)
    xi, xp = decompose_batch(ens)
    g = scenario.grid
    return GridPath(g, xi[0]), GridPath(g, xp[0])


def _single(scenario):
    """One-path ensemble view of a scenario."""
    path = scenario.path
    batch = NodeBatch.from_path(path, scenario.measure, scenario.compensator)
    n = len(path.grid)
    brown = scenario.brownian.values[None, :] if scenario.brownian is not None else None
    clock = scenario.clock.values[None, :] if scenario.clock is not None else None
    base = path.grid.nodes
    model = scenario.model
    nu = model.compensator() if isinstance(model, PDMPModel) else scenario.compensator
    ps = scenario.p_star.values[None, :] if scenario.p_star is not None else None
    return Ensemble(model, path.grid.horizon, scenario.seed, batch, nu, base, np.arange(n)[None, :],
                    p_star=ps, brownian=brown, clock=clock)


class AtomEnsemble(NamedTuple):
    """Paths driven only by predictable atoms: a batch and its compensator."""

    batch: NodeBatch
    compensator: CompensatorSpec


def simulate_atom_ensemble(atom_kernels, T, seed, n_paths, x0=0.0, first=0):
    """Pure predictable-atom paths ``X = x0 + sum of marks``.

    ``atom_kernels`` maps each predictable time to its compensator atom; a
    kernel of mass ``p < 1`` fires with probability ``p`` (a time in ``J``
    minus ``K``), a mass-one kernel always fires.
    """
    times = np.array(sorted(float(t) for t in atom_kernels))
    if times.size == 0 or times[0] <= 0 or times[-1] >= T:
        raise ValueError("atom times must lie strictly inside (0, T)")
    kernel = ByTime(atom_kernels)
    streams = PathStreams(seed, n_paths, first)
    L = times.size + 2
    t = np.broadcast_to(np.concatenate([[0.0], times, [float(T)]]), (n_paths, L)).copy()
    X = np.full((n_paths, L), float(x0))
    XL = X.copy()
    mark = np.full((n_paths, L), np.nan)
    rows = np.arange(n_paths)
    for j, s in enumerate(times, start=1):
        k = kernel.lookup(s)
        xl = X[:, j - 1]
        XL[:, j] = xl
        mass = np.asarray(k.total_mass(np.full(n_paths, s), xl), dtype=float)
        fire = streams.uniforms(rows, 1)[:, 0] < mass
        base = k.base if isinstance(k, Scaled) else k
        e = sample_marks(base, np.full(fire.sum(), s), xl[fire], streams.draw(rows[fire]))
        mark[fire, j] = e
        X[:, j] = xl + np.where(fire, np.nan_to_num(mark[:, j]), 0.0)
    X[:, -1] = XL[:, -1] = X[:, -2]
    dt = np.zeros((n_paths, L))
    atom = np.zeros((n_paths, L), dtype=bool)
    atom[:, 1:-1] = True
    batch = NodeBatch(t, X, XL, dt, np.full(n_paths, L), mark, ~np.isnan(mark), atom)
    return AtomEnsemble(batch, CompensatorSpec(None, times, kernel))


def as_ensemble(obj):
    return obj if isinstance(obj, (Ensemble, AtomEnsemble)) else _single(obj)


class TransferResult(dict):
    """Per-path maximal discrepancies of the two measure-transfer identities."""


def verify_measure_transfer(phi, scenario):
    """Compare ``int phi d(mu^X - nu^X)`` with ``int phi(gamma~) d(mu - nu)`` node by node.

    ``phi(t, x)`` must vanish at ``x = 0``.  Returns arrays (one entry per path)
    ``compensated`` and ``raw``; the raw identity is
    ``int phi dmu^X = int phi(gamma~) dmu + sum phi(dXp)``.
    """
    field_x = PredictableField(lambda t, x, e: phi(t, e), jump_transform=True, name="phi")
    ens = as_ensemble(scenario)
    bx = ens.jump_batch()
    nux = ens.jump_compensator()
    if ens.is_pdmp:
        composed = field_x
    else:
        g = ens.model.gamma
        composed = PredictableField(lambda t, x, e: phi(t, _vec_gamma(g, t, x, e)), name="phi(gamma)")
    b = ens.batch
    lhs = integral_paths(field_x, nux, bx)
    rhs = integral_paths(composed, ens.compensator, b)
    comp = np.where(b.valid, np.abs(lhs - rhs), 0.0).max(axis=1)

    lhs_raw = integral_paths(field_x, None, bx, compensator=False)
    rhs_raw = integral_paths(composed, None, b, compensator=False)
    if not ens.is_pdmp:
        dc = ens.model.clock_jump(b.t)
        cj = (dc > 0) & b.valid
        extra = np.zeros(b.shape)
        dxp = _vec_tx(ens.model.b, b.t[cj], b.xl[cj]) * dc[cj]
        extra[cj] = np.where(dxp != 0, phi(b.t[cj], dxp), 0.0)
        rhs_raw = rhs_raw + np.cumsum(extra, axis=1)
    raw = np.where(b.valid, np.abs(lhs_raw - rhs_raw), 0.0).max(axis=1)
    return TransferResult(compensated=comp, raw=raw)
