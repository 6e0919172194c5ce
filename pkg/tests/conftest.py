import numpy as np
import pytest

from bsdeid.kernels import Dirac, Uniform
from bsdeid.measures import GridPath, TimeGrid
from bsdeid.processes import JumpDiffusionModel, PDMPModel


def const(c):
    return lambda *args: np.full(np.broadcast(*[np.asarray(a) for a in args]).shape, float(c))


def mark(t, x, e):
    return np.asarray(e, dtype=float) + 0.0 * np.asarray(x, dtype=float)


def flat_path(horizon=1.0, steps=10, extra=(), value=0.0, jumps=None):
    """Constant path on a uniform grid; ``jumps`` maps node time -> jump size."""
    grid = TimeGrid.uniform(horizon, steps, extra)
    x = np.full(len(grid), float(value))
    xl = x.copy()
    for t, size in sorted((jumps or {}).items()):
        i = grid.index(t)
        x[i:] += size
        xl[i + 1:] += size
    return GridPath(grid, x, xl)


def poisson_model(rate=1.0, size=1.0):
    """Compensated Poisson drive: X = N - rate * t with unit marks."""
    return JumpDiffusionModel(const(0.0), const(0.0), mark, 0.0, rate=rate, marks=Dirac(size=size),
                              name="poisson")


def unit_flow_pdmp(lam=0.0, x0=0.0, q=0.25):
    return PDMPModel(const(1.0), const(lam), Dirac(target=q), x0)


def interior_pdmp(lam=2.0):
    return PDMPModel(const(0.0), const(lam), Uniform(0.1, 0.9, target=True), 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
