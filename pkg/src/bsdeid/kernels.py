"""Mark kernels: finite quadrature rules and samplers for measures on the mark space.

Every kernel is a (possibly state-dependent) measure on the real line.  All
evaluation is vectorised: ``t`` and ``x`` are 1-d arrays of length ``M`` and
:meth:`MarkKernel.quadrature` returns ``(points, weights)`` of shape ``(M, q)``.

Discrete kernels are sampled by inverse CDF, density kernels by rejection
against a uniform envelope on their support window.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

GL_ORDER = 64
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)


def _as_1d(a, n=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = np.full(1 if n is None else n, float(a))
    return a


class MarkKernel:
    """Base class.  ``kind`` is ``"discrete"`` or ``"density"``."""

    kind = "discrete"
    mass = 1.0

    def quadrature(self, t, x):
        raise NotImplementedError

    def total_mass(self, t, x):
        return np.full(np.shape(np.asarray(x, dtype=float)), self.mass)

    # discrete kernels
    def inverse_cdf(self, t, x, u):
        raise NotImplementedError

    # density kernels
    def window(self, t, x):
        raise NotImplementedError

    def pdf(self, t, x, e):
        raise NotImplementedError

    def pdf_bound(self, t, x):
        raise NotImplementedError

    def mean(self, t, x):
        pts, w = self.quadrature(_as_1d(t), _as_1d(x))
        return (pts * w).sum(axis=1)


class Dirac(MarkKernel):
    """Unit mass at a fixed jump ``size``, or at ``target - x`` (jump to a fixed state)."""

    def __init__(self, size=None, target=None):
        if (size is None) == (target is None):
            raise ValueError("Dirac kernel needs exactly one of size/target")
        self.size = size
        self.target = target

    def _point(self, x):
        x = np.asarray(x, dtype=float)
        if self.target is not None:
            return self.target - x
        return np.full(x.shape, float(self.size))

    def quadrature(self, t, x):
        p = self._point(x)
        return p[:, None], np.ones((p.shape[0], 1))

    def inverse_cdf(self, t, x, u):
        return self._point(x)

    def __repr__(self):
        if self.target is not None:
            return f"Dirac(target={self.target})"
        return f"Dirac(size={self.size})"


class Discrete(MarkKernel):
    """Finitely many weighted points; with ``target=True`` the points are post-jump states."""

    def __init__(self, values, probs, target=False):
        self.values = np.asarray(values, dtype=float)
        self.probs = np.asarray(probs, dtype=float)
        if self.values.shape != self.probs.shape or self.values.ndim != 1:
            raise ValueError("values and probs must be 1-d arrays of equal length")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        total = self.probs.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total}, expected 1")
        self.target = target
        self._cum = np.cumsum(self.probs)
        self._cum[-1] = 1.0

    def quadrature(self, t, x):
        x = np.asarray(x, dtype=float)
        pts = np.broadcast_to(self.values, (x.shape[0], self.values.size))
        if self.target:
            pts = pts - x[:, None]
        return np.array(pts), np.broadcast_to(self.probs, pts.shape).copy()

    def inverse_cdf(self, t, x, u):
        idx = np.searchsorted(self._cum, u, side="right")
        idx = np.minimum(idx, self.values.size - 1)
        v = self.values[idx]
        return v - np.asarray(x, dtype=float) if self.target else v


class Tabulated(MarkKernel):
    """Discrete kernels indexed by state: row ``int(x)`` of ``points``/``weights``.

    Lets one batch carry many unrelated atom kernels, one per state label.
    Rows may have total weight below one.
    """

    def __init__(self, points, weights):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if self.points.shape != self.weights.shape or self.points.ndim != 2:
            raise ValueError("points and weights must be 2-d arrays of equal shape")
        if np.any(self.weights < 0):
            raise ValueError("negative weight")

    def _rows(self, x):
        return np.asarray(x, dtype=float).astype(np.intp)

    def quadrature(self, t, x):
        r = self._rows(x)
        return self.points[r].copy(), self.weights[r].copy()

    def total_mass(self, t, x):
        return self.weights[self._rows(x)].sum(axis=1)


class _Density(MarkKernel):
    kind = "density"

    def quadrature(self, t, x):
        lo, hi = self.window(t, x)
        half = 0.5 * (hi - lo)
        pts = lo[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)
        w = half[:, None] * _GL_W[None, :] * self.pdf(t, x, pts)
        # declared mass is exact; the rule only shapes the distribution
        w *= (self.mass / w.sum(axis=1))[:, None]
        return pts, w


class Uniform(_Density):
    """Uniform on ``[lo, hi]``; with ``target=True`` the post-jump state is uniform."""

    def __init__(self, lo, hi, target=False):
        if not hi > lo:
            raise ValueError("need hi > lo")
        self.lo, self.hi, self.target = float(lo), float(hi), target

    def window(self, t, x):
        x = _as_1d(x)
        shift = x if self.target else np.zeros_like(x)
        return self.lo - shift, self.hi - shift

    def pdf(self, t, x, e):
        return np.full(np.shape(e), 1.0 / (self.hi - self.lo))

    def pdf_bound(self, t, x):
        return np.full(np.shape(_as_1d(x)), 1.0 / (self.hi - self.lo))


class Normal(_Density):
    """Gaussian marks, truncated for quadrature to ``mean +- 8 sd``."""

    def __init__(self, mean=0.0, sd=1.0):
        if not sd > 0:
            raise ValueError("sd must be positive")
        self.mu, self.sd = float(mean), float(sd)

    def window(self, t, x):
        n = _as_1d(x).shape[0]
        return np.full(n, self.mu - 8 * self.sd), np.full(n, self.mu + 8 * self.sd)

    def pdf(self, t, x, e):
        return stats.norm.pdf(e, loc=self.mu, scale=self.sd)

    def pdf_bound(self, t, x):
        return np.full(_as_1d(x).shape[0], stats.norm.pdf(0.0, scale=self.sd))


class Scaled(MarkKernel):
    """Sub-probability version ``mass * kernel`` (an atom of the compensator with mass < 1)."""

    def __init__(self, kernel, mass):
        if not 0.0 <= mass <= 1.0:
            raise ValueError("atom mass must lie in [0, 1]")
        self.base = kernel
        self.kind = kernel.kind
        self.mass = float(mass)

    def quadrature(self, t, x):
        pts, w = self.base.quadrature(t, x)
        return pts, w * self.mass

    def inverse_cdf(self, t, x, u):
        return self.base.inverse_cdf(t, x, u)

    def window(self, t, x):
        return self.base.window(t, x)

    def pdf(self, t, x, e):
        return self.base.pdf(t, x, e)

    def pdf_bound(self, t, x):
        return self.base.pdf_bound(t, x)


class RateKernel(MarkKernel):
    """Rate measure ``rate(t, x) * kernel(t, x, de)`` per unit time (an absolutely continuous compensator part)."""

    def __init__(self, rate, kernel):
        self.rate = rate
        self.base = kernel
        self.kind = kernel.kind

    def rates(self, t, x):
        t = _as_1d(t)
        x = _as_1d(x, t.shape[0])
        return np.broadcast_to(np.asarray(self.rate(t, x), dtype=float), x.shape).copy()

    def quadrature(self, t, x):
        pts, w = self.base.quadrature(t, x)
        return pts, w * self.rates(t, x)[:, None]

    def total_mass(self, t, x):
        return self.rates(t, x)


class ByTime(MarkKernel):
    """Kernels attached to fixed predictable times (looked up by exact time value)."""

    def __init__(self, kernels):
        self.kernels = {float(k): v for k, v in dict(kernels).items()}
        if not self.kernels:
            raise ValueError("no atom kernels given")
        kinds = {k.kind for k in self.kernels.values()}
        self.kind = kinds.pop() if len(kinds) == 1 else "mixed"

    def lookup(self, t):
        try:
            return self.kernels[float(t)]
        except KeyError:
            raise KeyError(f"no kernel declared at time {t!r}") from None

    def quadrature(self, t, x):
        t = _as_1d(t)
        x = _as_1d(x, t.shape[0])
        parts = {}
        for tv in np.unique(t):
            sel = np.flatnonzero(t == tv)
            parts[tv] = (sel, self.lookup(tv).quadrature(t[sel], x[sel]))
        q = max(p[1][0].shape[1] for p in parts.values())
        pts = np.zeros((t.shape[0], q))
        w = np.zeros((t.shape[0], q))
        for sel, (p, ww) in parts.values():
            pts[sel, : p.shape[1]] = p
            w[sel, : p.shape[1]] = ww
        return pts, w

    def total_mass(self, t, x):
        t = _as_1d(t)
        return np.array([self.lookup(tv).mass for tv in t], dtype=float)


class PushForward(MarkKernel):
    """Image of ``kernel`` under the jump map ``e -> gamma(t, x, e)``."""

    def __init__(self, kernel, gamma):
        self.base = kernel
        self.gamma = gamma
        self.kind = kernel.kind

    def quadrature(self, t, x):
        t = _as_1d(t)
        x = _as_1d(x, t.shape[0])
        pts, w = self.base.quadrature(t, x)
        return self.gamma(t[:, None], x[:, None], pts), w

    def total_mass(self, t, x):
        return self.base.total_mass(t, x)


def sample_marks(kernel, t, x, draw):
    """Draw one mark per row of ``(t, x)`` from a probability kernel.

    ``draw(rows, k)`` must return ``k`` fresh uniforms for each selected row
    (rows index into ``t``/``x``).  Discrete kernels use one uniform per mark;
    density kernels use rejection, consuming two uniforms per proposal.
    """
    t = _as_1d(t)
    x = _as_1d(x, t.shape[0])
    n = t.shape[0]
    if n == 0:
        return np.empty(0)
    base = kernel.base if isinstance(kernel, Scaled) else kernel
    if base.kind == "discrete":
        u = draw(np.arange(n), 1)[:, 0]
        return np.asarray(base.inverse_cdf(t, x, u), dtype=float)
    if base.kind != "density":
        raise TypeError(f"cannot sample from kernel of kind {base.kind!r}")
    out = np.empty(n)
    pending = np.arange(n)
    lo, hi = base.window(t, x)
    bound = base.pdf_bound(t, x)
    for _ in range(10_000):
        u = draw(pending, 2)
        e = lo[pending] + (hi[pending] - lo[pending]) * u[:, 0]
        ok = u[:, 1] * bound[pending] <= base.pdf(t[pending], x[pending], e)
        out[pending[ok]] = e[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise RuntimeError("rejection sampler did not terminate")
