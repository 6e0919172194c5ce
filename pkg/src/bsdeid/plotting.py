"""PNG figures for a finished run (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}
# fixed metadata keeps repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_paths(ensemble, path, n_show=12):
    """First paths of the ensemble with their jump atoms marked by kind."""
    b = ensemble.batch
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i in range(min(n_show, b.shape[0])):
            n = int(b.n_nodes[i])
            t, x, xl = b.t[i, :n], b.x[i, :n], b.xl[i, :n]
            # draw each node as (t, X_{t-}) -> (t, X_t) so jumps show as vertical gaps
            tt = np.repeat(t, 2)
            xx = np.column_stack([xl, x]).ravel()
            (line,) = ax.plot(tt, xx, lw=0.8, alpha=0.8)
            has = ~np.isnan(b.mu_mark[i, :n])
            pred = has & b.mu_pred[i, :n]
            inac = has & ~b.mu_pred[i, :n]
            ax.plot(t[inac], x[inac], "o", ms=3, color=line.get_color())
            ax.plot(t[pred], x[pred], "s", ms=4, mfc="none", color=line.get_color())
        ax.plot([], [], "o", color="0.3", ms=3, label="inaccessible jump")
        ax.plot([], [], "s", color="0.3", ms=4, mfc="none", label="predictable jump")
        ax.set_xlabel("t")
        ax.set_ylabel("X")
        ax.legend(loc="best")
        _save(fig, path)


def plot_solution(solution, oracle_mean, path):
    """Ensemble mean of Y per node against the oracle, with the regression residual."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(solution.times, solution.Y.mean(axis=0), "-", lw=1.2, label="mean Y (regression)")
        if oracle_mean is not None:
            ax.plot(solution.times, oracle_mean, "--", lw=1.0, label="mean v(t, X_t) (oracle)")
        ax.set_xlabel("t")
        ax.set_ylabel("Y")
        ax2 = ax.twinx()
        ax2.semilogy(solution.times, solution.residuals, ":", color="0.4", lw=1.0, label="regression residual")
        ax2.set_ylabel("mean squared residual")
        ax2.grid(False)
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, loc="best")
        _save(fig, path)


def plot_martingale(terminal, path, label="terminal value of int H d(mu - nu)"):
    """Histogram of per-path terminal values of the compensated integral."""
    terminal = np.asarray(terminal, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if np.ptp(terminal) > 0:
            ax.hist(terminal, bins=80, color="0.5")
        else:
            ax.axvline(terminal[0] if terminal.size else 0.0, color="0.3")
        ax.axvline(np.mean(terminal) if terminal.size else 0.0, color="C3", lw=1.0, label="ensemble mean")
        ax.set_xlabel(label)
        ax.set_ylabel("paths")
        ax.legend(loc="best")
        _save(fig, path)


def plot_u_atoms(t, u, target, path):
    """Regression ``U`` at realised atoms against the oracle increment of ``v``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        sc = ax.scatter(target, u, c=t, s=4, cmap="viridis")
        lo = float(min(np.min(target), np.min(u))) if len(u) else 0.0
        hi = float(max(np.max(target), np.max(u))) if len(u) else 1.0
        ax.plot([lo, hi], [lo, hi], "k-", lw=0.6)
        ax.set_xlabel("v(s, X_s- + jump) - v(s, X_s-)")
        ax.set_ylabel("U at the atom")
        fig.colorbar(sc, ax=ax, label="s")
        _save(fig, path)
