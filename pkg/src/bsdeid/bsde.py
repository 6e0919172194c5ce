"""Backward solvers (least-squares Monte Carlo) and value-function oracles.

The solvers run on the common base grid of an ensemble.  The conditional
expectation at node ``t_k`` is a least-squares projection onto polynomials
in ``X_{t_k}``; the fitted functions ``y_k(x)`` double as a value surrogate,
from which the jump component ``U`` is read off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .kernels import Dirac
from .measures import PredictableField, ac_average, batch_atom_masses, fmt
from .processes import Ensemble, PDMPModel, _vec, _vec_gamma, _vec_tx

FIXED_POINT_TOL = 1e-10
FIXED_POINT_ITERS = 50


class RegressionError(ArithmeticError):
    """Rank-deficient regression design."""


class FixedPointError(ArithmeticError):
    """The implicit driver step did not converge (or violates the step-size guard)."""


# ---------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True)
class Driver:
    """``f(t, x, y, z, u) = const + by * y + bz * z + bu * u``.

    ``u`` is the integral of ``U`` against the absolutely continuous
    compensator kernel (per unit time).
    """

    const: float = 0.0
    by: float = 0.0
    bz: float = 0.0
    bu: float = 0.0

    @property
    def lipschitz_y(self):
        return abs(self.by)

    @property
    def uses_u(self):
        return self.bu != 0.0

    @property
    def is_zero(self):
        return self.const == self.by == self.bz == self.bu == 0.0

    def __call__(self, t, x, y, z, u):
        return self.const + self.by * y + self.bz * z + self.bu * u

    def scaled(self, kappa):
        """Driver for the problem with ``g`` and ``f`` multiplied by ``kappa``."""
        return Driver(kappa * self.const, self.by, self.bz, self.bu)


DRIVERS = {"zero": Driver(), "linear": None}


@dataclass(eq=False)
class BSDEProblem:
    g: object
    driver: Driver = field(default_factory=Driver)
    clock: str = "time"  # "time" or "compensator"
    with_brownian: bool = True

    def __post_init__(self):
        if self.clock not in ("time", "compensator"):
            raise ValueError("clock must be 'time' or 'compensator'")


@dataclass(eq=False)
class Fit:
    """Piecewise polynomial on equal cells of ``[lo, hi]``; one cell is a global polynomial.

    Each cell stores its own centre and scale; states outside ``[lo, hi]``
    use the nearest end cell.
    """

    lo: float
    width: float
    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray          # (cells, terms)

    points: int = 0           # distinct sample states behind the fit

    @property
    def cells(self):
        return self.coef.shape[0]

    def shifted(self, c):
        """Same shape, moved up by ``c``."""
        coef = self.coef.copy()
        coef[:, 0] += c
        return Fit(self.lo, self.width, self.center.copy(), self.scale.copy(), coef, self.points)

    def cell(self, x):
        if self.cells == 1:
            return np.zeros(np.shape(x), dtype=np.intp)
        c = np.floor((np.asarray(x, dtype=float) - self.lo) / self.width)
        return np.clip(c, 0, self.cells - 1).astype(np.intp)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        c = self.cell(x)
        z = (x - self.center[c]) / self.scale[c]
        coef = self.coef[c]
        out = coef[..., -1]
        for j in range(self.coef.shape[1] - 2, -1, -1):
            out = out * z + coef[..., j]
        return out


def _support_size(x):
    """Number of distinct states, merging values that differ only by rounding."""
    u = np.unique(x)
    if u.size < 2:
        return u.size
    tol = 1e-9 * max(1.0, float(u[-1] - u[0]))
    return 1 + int(np.count_nonzero(np.diff(u) > tol))


def _poly_fit(x, y, degree):
    """Least-squares polynomial in standardised ``x``: (centre, scale, coef, fitted)."""
    center = float(np.mean(x))
    scale = float(np.std(x))
    distinct = _support_size(x)
    if distinct <= degree:
        # too few support points: exact fit on group means with the highest identifiable degree
        degree = distinct - 1
    if scale == 0.0 or degree == 0:
        m = float(np.mean(y))
        return center, 1.0, np.array([m]), np.full(x.shape, m)
    z = (x - center) / scale
    A = np.vander(z, degree + 1, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < degree + 1:
        raise RegressionError(f"regression design has rank {rank} < {degree + 1}; reduce the basis degree")
    return center, scale, coef, A @ coef


def _fit(x, y, degree, cells=1):
    """Least-squares fit of ``y`` on ``x``; returns (Fit, fitted values, mean squared residual).

    With ``cells > 1`` the sampled range of ``x`` is cut into equal cells and
    each gets its own polynomial; empty cells borrow the nearest fitted one.
    """
    lo, hi = float(np.min(x)), float(np.max(x))
    if cells > 1 and hi > lo:
        width = (hi - lo) / cells
    else:
        cells, width = 1, 1.0
    fit = Fit(lo, width, np.ones(cells), np.ones(cells), np.zeros((cells, degree + 1)), _support_size(x))
    fitted = np.empty_like(y, dtype=float)
    idx = fit.cell(x)
    filled = np.zeros(cells, dtype=bool)
    for c in range(cells):
        sel = idx == c
        if not sel.any():
            continue
        ctr, sc, coef, fv = _poly_fit(x[sel], y[sel], degree)
        fit.center[c], fit.scale[c] = ctr, sc
        fit.coef[c, : coef.size] = coef
        fitted[sel] = fv
        filled[c] = True
    if not filled.all():
        src = np.flatnonzero(filled)
        for c in np.flatnonzero(~filled):
            j = src[np.argmin(np.abs(src - c))]
            fit.center[c], fit.scale[c], fit.coef[c] = fit.center[j], fit.scale[j], fit.coef[j]
    res = y - fitted
    return fit, fitted, float(np.mean(res * res))


# ---------------------------------------------------------------------------
# solution


@dataclass(eq=False)
class BSDESolution:
    """Grid solution on the base nodes plus the value surrogate."""

    times: np.ndarray
    Y: np.ndarray            # (paths, nodes)
    Z: np.ndarray | None     # (paths, nodes); last node NaN
    fits: list               # fitted y_k(x) per node; the terminal entry is g
    residuals: np.ndarray    # mean squared regression residual per node (NaN at T)
    ensemble: Ensemble
    boundary_average: bool = False
    zfits: list = field(default_factory=list)

    def __post_init__(self):
        inner = self.fits[:-1]
        cells = max(f.cells for f in inner)
        terms = max(f.coef.shape[1] for f in inner)
        n = len(inner)
        coef = np.zeros((terms, n, cells))
        center = np.zeros((n, cells))
        scale = np.ones((n, cells))
        for k, f in enumerate(inner):
            coef[: f.coef.shape[1], k, : f.cells] = f.coef.T
            center[k, : f.cells] = f.center
            scale[k, : f.cells] = f.scale
        # flat tables indexed by k * cells + cell
        self._ncell = cells
        self._coef = coef.reshape(terms, -1)
        self._center = center.ravel()
        self._inv_scale = 1.0 / scale.ravel()
        self._lo = np.array([f.lo for f in inner])
        self._inv_width = np.array([1.0 / f.width for f in inner])
        self._top = np.array([f.cells - 1 for f in inner])

    def _node_value(self, k, x):
        """Fit ``k`` evaluated elementwise (``k`` below the terminal node)."""
        if self._ncell == 1:
            flat = np.asarray(k)
        else:
            c = ((x - self._lo[k]) * self._inv_width[k]).astype(np.intp)
            np.clip(c, 0, self._top[k], out=c)
            flat = k * self._ncell + c
        z = (x - self._center[flat]) * self._inv_scale[flat]
        out = self._coef[-1][flat]
        for j in range(self._coef.shape[0] - 2, -1, -1):
            out = out * z + self._coef[j][flat]
        return out

    def value(self, t, x):
        """Surrogate ``v(t, x)``: node fits interpolated linearly in time.

        Time lookups happen on ``t``'s own shape, so a ``(rows, 1)`` time
        column against ``(rows, q)`` states costs one lookup per row.
        """
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        last = self.times.size - 1
        k = np.clip(np.searchsorted(self.times, t, side="left"), 1, last)
        w = (t - self.times[k - 1]) / (self.times[k] - self.times[k - 1])
        inner = k < last
        out = (1 - w) * self._node_value(k - 1, x) + np.where(inner, w, 0.0) * self._node_value(
            np.minimum(k, last - 1), x)
        term = ~inner & (w != 0)
        if np.any(term):
            out = np.array(out, dtype=float)
            tb = np.broadcast_to(term, out.shape)
            out[tb] += np.broadcast_to(w, out.shape)[tb] * self.fits[-1](np.broadcast_to(x, out.shape)[tb])
        return out

    def node_value(self, k, x):
        return self.fits[k](x)

    def z_on(self, ensemble):
        """``Z`` fits evaluated on the base nodes of another ensemble of the same model."""
        X = ensemble.base_values
        out = np.full(X.shape, np.nan)
        for k, f in enumerate(self.zfits):
            if f is not None:
                out[:, k] = f(X[:, k])
        return out

    def U_field(self):
        """``U(t, x, e)``: surrogate value after the jump minus before it.

        For PDMPs at the boundary the pre-jump value is the kernel average of
        the post-jump values.
        """
        ens = self.ensemble
        model = ens.model
        if isinstance(model, PDMPModel):
            Q = model.Q

            def U(t, x, e):
                t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
                after = self.value(t, x + np.asarray(e, float))
                before = np.array(self.value(t, x), dtype=float)
                at_b = (x <= 0.0) | (x >= 1.0)
                if self.boundary_average and at_b.any():
                    # one kernel average per distinct pre-jump (t, x)
                    keys, inv = np.unique(np.stack([t[at_b], x[at_b]]), axis=1, return_inverse=True)
                    pts, w = Q.quadrature(keys[0], keys[1])
                    avg = (w * self.value(keys[0][:, None], keys[1][:, None] + pts)).sum(axis=1)
                    before[at_b] = avg[inv.ravel()]
                return after - before
        else:
            g = model.gamma

            def U(t, x, e):
                return self.value(t, x + _vec_gamma(g, t, x, e)) - self.value(t, x)

        return PredictableField(U, name="U")

    def path_Y(self, i):
        return self.Y[i]

    def steps_csv(self):
        lines = ["t,mean_Y,mean_Z,regression_residual"]
        for k, t in enumerate(self.times):
            mz = np.nan if self.Z is None else float(np.mean(self.Z[:, k]))
            lines.append(",".join([fmt(t), fmt(np.mean(self.Y[:, k])), fmt(mz), fmt(self.residuals[k])]))
        return "\n".join(lines) + "\n"

    def atom_table(self, max_paths=None):
        """Rows ``(t, mark, U)`` at the realised atoms of the first ``max_paths`` paths, time-sorted."""
        b = self.ensemble.batch
        has = b.has_mu
        if max_paths is not None:
            has = has & (np.arange(b.shape[0])[:, None] < max_paths)
        if not has.any():
            return []
        vals = self.U_field().at_atoms(b.t[has], b.xl[has], b.mu_mark[has], b.x[has])
        return sorted(zip(b.t[has].tolist(), b.mu_mark[has].tolist(), vals.tolist()))

    def atoms_csv(self, max_paths=None):
        lines = ["t,mark,U_value"]
        for t, e, u in self.atom_table(max_paths):
            lines.append(f"{fmt(t)},{fmt(e)},{fmt(u)}")
        return "\n".join(lines) + "\n"


def compensator_clock(ensemble):
    """Cumulative total compensator mass ``A`` at every node, shape ``(paths, L)``."""
    b = ensemble.batch
    nu = ensemble.compensator
    inc = np.zeros(b.shape)
    if nu.ac is not None:
        rate, = ac_average(lambda t, x: (nu.ac.total_mass(t, x),), b, nu.ac_rule)
        inc[:, 1:] += (b.dt * rate)[:, :-1]
    if b.nu_atom.any():
        inc[b.nu_atom] += batch_atom_masses(nu, b)
    return np.cumsum(inc, axis=1)


def _u_integral(fit_next, t, x, ensemble):
    """Per unit time ``int (y(x + gamma) - y(x)) nu^c(de)`` for the driver's ``u`` argument."""
    nu = ensemble.compensator
    if nu.ac is None:
        return np.zeros_like(x)
    pts, w = nu.ac.quadrature(t, x)
    model = ensemble.model
    jumps = pts if isinstance(model, PDMPModel) else _vec_gamma(model.gamma, t[:, None], x[:, None], pts)
    return (w * (fit_next(x[:, None] + jumps) - fit_next(x)[:, None])).sum(axis=1)


def _solve(problem, ensemble, degree, with_z, boundary_average, cells=1):
    if len(ensemble) < 2:
        raise ValueError("need at least two paths")
    times = ensemble.base_nodes
    nb = times.size
    X = ensemble.base_values
    n = X.shape[0]
    if problem.clock == "time":
        A = np.broadcast_to(times, X.shape)
    else:
        A = ensemble.at_base(compensator_clock(ensemble))
    dA = np.diff(A, axis=1)
    W = ensemble.at_base(ensemble.brownian) if (with_z and ensemble.brownian is not None) else None
    drv = problem.driver
    if drv.lipschitz_y and np.max(dA) * drv.lipschitz_y >= 0.5:
        raise FixedPointError("step-size guard violated: dA * Lip(f) >= 0.5")

    Y = np.empty_like(X)
    Z = np.full_like(X, np.nan) if W is not None else None
    Y[:, -1] = _vec(problem.g, X[:, -1])
    fits = [None] * nb
    fits[-1] = lambda x, g=problem.g: _vec(g, np.asarray(x, dtype=float))
    zfits = [None] * nb
    residuals = np.full(nb, np.nan)
    # multi-step targets: g(X_T) plus the driver increments already accumulated after t_k
    future = Y[:, -1].copy()
    for k in range(nb - 2, -1, -1):
        xk = X[:, k]
        tk = np.full(n, times[k])
        z = np.zeros(n)
        if W is not None:
            _, pred0, _ = _fit(xk, Y[:, k + 1], degree, cells)
            dW = W[:, k + 1] - W[:, k]
            h = times[k + 1] - times[k]
            zfits[k], z, _ = _fit(xk, (Y[:, k + 1] - pred0) * dW / h, degree, cells)
            Z[:, k] = z
        u = _u_integral(fits[k + 1], tk, xk, ensemble) if drv.uses_u else np.zeros(n)
        if drv.is_zero:
            fit, y, res = _fit(xk, future, degree, cells)
        else:
            fit, y, res = _fit(xk, future + drv(tk, xk, Y[:, k + 1], z, u) * dA[:, k], degree, cells)
            for _ in range(FIXED_POINT_ITERS):
                fit, y_new, res = _fit(xk, future + drv(tk, xk, y, z, u) * dA[:, k], degree, cells)
                delta = np.max(np.abs(y_new - y))
                y = y_new
                if delta <= FIXED_POINT_TOL:
                    break
            else:
                raise FixedPointError(f"implicit step at t={times[k]} did not converge")
            future = future + drv(tk, xk, y, z, u) * dA[:, k]
        Y[:, k] = y
        fits[k] = fit
        residuals[k] = res
    # a node where every path sits at one state pins only a value: borrow the
    # next node's shape for the surrogate (Y itself is unchanged)
    for k in range(nb - 3, -1, -1):
        if fits[k].points == 1 and fits[k + 1].points > 1:
            fits[k] = fits[k + 1].shifted(float(np.mean(Y[:, k])) - float(np.mean(fits[k + 1](X[:, k]))))
    sol = BSDESolution(times, Y, Z, fits, residuals, ensemble, boundary_average, zfits=zfits)
    return sol


def solve_bsde_lsmc(problem, ensemble, basis_degree=3, basis_cells=1):
    """Regression Monte Carlo for ``Y = g(X_T) + int f dA - int Z dN - int U d(mu - nu)``.

    ``basis_cells > 1`` switches from one global polynomial to local
    polynomials of the same degree on equal cells of the sampled state range.
    """
    if isinstance(ensemble.model, PDMPModel):
        raise ValueError("use solve_bsde_pdmp for PDMP ensembles")
    return _solve(problem, ensemble, basis_degree, problem.with_brownian, boundary_average=False, cells=basis_cells)


def solve_bsde_pdmp(problem, ensemble, basis_degree=3, basis_cells=1):
    """Regression in the PDMP state; no Brownian component, boundary kernel averaged analytically."""
    if not isinstance(ensemble.model, PDMPModel):
        raise ValueError("solve_bsde_pdmp needs a PDMP ensemble")
    return _solve(problem, ensemble, basis_degree, with_z=False, boundary_average=True, cells=basis_cells)


# ---------------------------------------------------------------------------
# oracles


@dataclass(eq=False)
class Oracle:
    v: object
    dv: object
    provenance: str
    window: tuple = (-2.0, 2.0)
    horizon: float = 1.0

    def fd_check(self, probes=None, h=1e-5):
        """Largest ``|dv - central difference|`` over probe points."""
        if probes is None:
            lo, hi = self.window
            tt, xx = np.meshgrid(np.linspace(0.0, self.horizon, 7), np.linspace(lo, hi, 11)[1:-1])
            probes = (tt.ravel(), xx.ravel())
        t, x = probes
        fd = (self.v(t, x + h) - self.v(t, x - h)) / (2 * h)
        return float(np.max(np.abs(fd - self.dv(t, x))))

    def increment_field(self, model):
        """``v(t, x + gamma~(t, x, e)) - v(t, x)``."""
        if isinstance(model, PDMPModel):
            return PredictableField(lambda t, x, e: self.v(t, x + e) - self.v(t, x), name="dv-jump")
        g = model.gamma
        return PredictableField(lambda t, x, e: self.v(t, x + _vec_gamma(g, t, x, e)) - self.v(t, x),
                                name="dv-jump")


def _linear_oracle(name, T):
    return Oracle(lambda t, x: np.asarray(x, dtype=float) + 0.0 * np.asarray(t, dtype=float),
                  lambda t, x: np.ones(np.broadcast(np.asarray(t), np.asarray(x)).shape), name, horizon=T)


def flow_hit_value(t, x, T, q):
    """``g(X_T)`` with ``g(x) = x`` for the unit-speed flow on [0, 1] that jumps to ``q`` at ``x = 1``.

    A hit exactly at ``T`` counts (atoms live on ``(0, T]``).
    """
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    s = t.copy()
    y = x.copy()
    live = np.ones(s.shape, dtype=bool)
    out = np.empty(s.shape)
    for _ in range(10_000):
        if not live.any():
            return out
        hit = live & (s + (1.0 - y) <= T)
        done = live & ~hit
        out[done] = y[done] + (T - s[done])
        live = hit
        s = np.where(hit, s + (1.0 - y), s)
        y = np.where(hit, q, y)
    raise RuntimeError("flow recursion did not terminate")


def closed_form_oracle(benchmark_id, T=1.0, q=0.25, lam=2.0):
    if benchmark_id in ("brownian-linear", "poisson-linear", "brownian-poisson"):
        return _linear_oracle(benchmark_id, T)
    if benchmark_id == "heat-quadratic":
        return Oracle(lambda t, x: np.asarray(x) ** 2 + (T - np.asarray(t)),
                      lambda t, x: 2.0 * np.asarray(x) + 0.0 * np.asarray(t), benchmark_id, horizon=T)
    if benchmark_id == "pdmp-deterministic":
        return Oracle(lambda t, x: flow_hit_value(t, x, T, q),
                      lambda t, x: np.ones(np.broadcast(np.asarray(t), np.asarray(x)).shape),
                      benchmark_id, window=(0.0, 1.0), horizon=T)
    if benchmark_id == "pdmp-interior":
        r = 1.0 + lam
        return Oracle(lambda t, x: 0.5 + (np.asarray(x) - 0.5) * np.exp(-r * (T - np.asarray(t))),
                      lambda t, x: np.exp(-r * (T - np.asarray(t))) + 0.0 * np.asarray(x),
                      benchmark_id, window=(0.0, 1.0), horizon=T)
    raise ValueError(f"unknown benchmark id {benchmark_id!r}")


class IntegroOracle:
    """Value function ``E[g(X_T) | X_t = x]`` of a PDMP whose post-jump law ``pi`` does not depend on the pre-jump state.

    Along the flow from ``x`` with survival ``exp(-Lambda(s))`` up to
    ``tau = min(hit time, T - t)``::

        v(t, x) = exp(-Lambda(tau)) * exit + int_0^tau lam(Phi_s x) exp(-Lambda(s)) m(t + s) ds,

    where ``m(t) = int v(t, y) pi(dy)`` and ``exit`` is ``g(Phi_tau x)``, or
    ``m(t + tau)`` after a boundary hit.  ``m`` is solved backward on a time
    grid (trapezoid rule; each node value enters linearly and is solved for
    exactly); ``v`` is then tabulated on a state grid and interpolated.
    """

    def __init__(self, model, T, g, n_t=1000, n_x=201):
        if getattr(model.Q, "target", False) is not True and not (
                isinstance(model.Q, Dirac) and model.Q.target is not None):
            raise NotImplementedError("the oracle needs a post-jump law independent of the pre-jump state")
        self.model, self.T, self.g = model, float(T), g
        self.ts = np.linspace(0.0, self.T, n_t + 1)
        self.ds = self.ts[1] - self.ts[0]
        pts, w = model.Q.quadrature(np.zeros(1), np.zeros(1))
        keep = w[0] != 0
        self.pi_y, self.pi_w = pts[0][keep], w[0][keep]
        fy = self._flows(self.pi_y)
        m = np.zeros(self.ts.size)
        for j in range(self.ts.size - 1, -1, -1):
            a0 = self.pi_w @ self._value(j, fy, m, 0.0)
            a1 = self.pi_w @ self._value(j, fy, m, 1.0)
            m[j] = a0 / (1.0 - (a1 - a0))
        self.m = m
        self.xs = np.linspace(0.0, 1.0, n_x)
        fx = self._flows(self.xs)
        table = np.stack([self._value(j, fx, m) for j in range(self.ts.size)])
        self.table = table
        self.dtable = np.gradient(table, self.xs, axis=1)
        self.dx = self.xs[1] - self.xs[0]

    def _flows(self, starts):
        """Flow state and integrated rate on the time grid (NaN after a hit), hit times, survival at the hit."""
        model = self.model
        h = lambda y: float(_vec(model.h, np.array([min(max(y, 0.0), 1.0)]))[0])
        lam = lambda y: float(_vec(model.lam, np.array([min(max(y, 0.0), 1.0)]))[0])

        def rhs(s, z):
            return [h(z[0]), lam(z[0])]

        def lo(s, z):
            return z[0]

        def hi(s, z):
            return 1.0 - z[0]

        lo.terminal = hi.terminal = True
        lo.direction = hi.direction = -1
        n = self.ts.size
        Y = np.full((starts.size, n), np.nan)
        Lam = np.full((starts.size, n), np.nan)
        hit = np.full(starts.size, np.inf)
        lam_hit = np.zeros(starts.size)
        for i, x in enumerate(starts):
            if (x >= 1.0 and h(1.0) >= 0) or (x <= 0.0 and h(0.0) <= 0):
                hit[i] = 0.0
                Y[i, 0], Lam[i, 0] = x, 0.0
                continue
            sol = solve_ivp(rhs, (0.0, self.T), [x, 0.0], events=(lo, hi), dense_output=True,
                            rtol=1e-11, atol=1e-13)
            end = self.T
            ev = [e[0] for e in sol.t_events if e.size]
            if ev:
                end = hit[i] = min(ev)
                lam_hit[i] = sol.sol(end)[1]
            upto = self.ts <= end
            vals = sol.sol(self.ts[upto])
            Y[i, upto] = np.clip(vals[0], 0.0, 1.0)
            Lam[i, upto] = vals[1]
        rate = np.where(np.isnan(Y), 0.0, _vec(model.lam, np.nan_to_num(Y)))
        return {"Y": Y, "a": rate * np.exp(-np.nan_to_num(Lam)), "Lam": Lam, "hit": hit, "lam_hit": lam_hit,
                "lam_edge": np.array([lam(1.0 if x > 0.5 else 0.0) for x in starts])}

    def _value(self, j, fl, m, mj=None):
        """Values at time node ``j`` for every start point; ``mj`` overrides ``m[j]``."""
        mm = m.copy()
        if mj is not None:
            mm[j] = mj
        n = self.ts.size
        rem = self.T - self.ts[j]
        ahead = n - j  # grid points in [t_j, T]
        hit = fl["hit"]
        by_hit = hit <= rem + 1e-13
        tau = np.where(by_hit, hit, rem)
        K = np.minimum(np.floor(tau / self.ds + 1e-9).astype(int), ahead - 1)
        frac = np.where(by_hit, tau - K * self.ds, 0.0)
        frac = np.where(frac < 1e-13, 0.0, frac)
        k = np.arange(ahead)[None, :]
        wts = np.where(k <= K[:, None], self.ds, 0.0)
        wts[:, 0] *= 0.5
        wts[np.arange(K.size), K] = np.where(K > 0, 0.5 * self.ds, 0.0)
        a = fl["a"][:, :ahead]
        seg = mm[j:]
        integral = (wts * a * seg[None, :]).sum(axis=1)
        aK = a[np.arange(K.size), K]
        mK = seg[K]
        nxt = np.minimum(K + 1, ahead - 1)
        m_tau = np.where(frac > 0, mK + (seg[nxt] - mK) * frac / self.ds, mK)
        a_tau = fl["lam_edge"] * np.exp(-fl["lam_hit"])
        integral += np.where(frac > 0, 0.5 * frac * (aK * mK + a_tau * m_tau), 0.0)
        lam_tau = np.where(by_hit, fl["lam_hit"], fl["Lam"][np.arange(K.size), K])
        y_end = fl["Y"][np.arange(K.size), K]
        exit_val = np.where(by_hit, m_tau, _vec(self.g, np.nan_to_num(y_end)))
        return np.exp(-np.nan_to_num(lam_tau)) * exit_val + integral

    def _interp(self, table, t, x):
        """Bilinear interpolation on the uniform (t, x) grid."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        ft = t / self.ds
        i = np.minimum(ft.astype(int), self.ts.size - 2)
        a = ft - i
        fx = x / self.dx
        j = np.minimum(fx.astype(int), self.xs.size - 2)
        b = fx - j
        lo = (1 - b) * table[i, j] + b * table[i, j + 1]
        hi = (1 - b) * table[i + 1, j] + b * table[i + 1, j + 1]
        return (1 - a) * lo + a * hi

    def v(self, t, x):
        return self._interp(self.table, t, x)

    def dv(self, t, x):
        return self._interp(self.dtable, t, x)

    def oracle(self, name):
        return Oracle(self.v, self.dv, name, window=(0.0, 1.0), horizon=self.T)
