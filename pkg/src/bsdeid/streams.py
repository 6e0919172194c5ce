"""Per-path random substreams with vectorised draws.

Path ``i`` of an ensemble seeded with ``seed`` always gets the generator
spawned as child ``i`` of ``SeedSequence(seed)``, so its draws do not depend
on how many other paths are simulated alongside it.
"""

import numpy as np
from scipy.special import ndtri

_BLOCK = 64
_HALF_ULP = 2.0 ** -54  # shifts random() off 0 so ndtri stays finite


class PathStreams:
    def __init__(self, seed, n_paths, first=0):
        children = np.random.SeedSequence(int(seed)).spawn(first + n_paths)[first:]
        self.gens = [np.random.Generator(np.random.PCG64(c)) for c in children]
        self.buf = np.stack([g.random(_BLOCK) for g in self.gens]) if n_paths else np.empty((0, _BLOCK))
        self.pos = np.zeros(n_paths, dtype=np.int64)

    def __len__(self):
        return len(self.gens)

    def _ensure(self, rows, k):
        short = rows[self.pos[rows] + k > self.buf.shape[1]]
        if short.size == 0:
            return
        if k > _BLOCK:
            raise ValueError("too many draws in one request")
        for r in np.unique(short):
            keep = self.buf[r, self.pos[r]:]
            self.buf[r, : keep.size] = keep
            self.buf[r, keep.size:] = self.gens[r].random(self.buf.shape[1] - keep.size)
            self.pos[r] = 0

    def uniforms(self, rows, k=1):
        """``k`` fresh uniforms in [0, 1) for each path in ``rows`` (rows must be distinct)."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return np.empty((0, k))
        self._ensure(rows, k)
        idx = self.pos[rows][:, None] + np.arange(k)[None, :]
        out = self.buf[rows[:, None], idx]
        self.pos[rows] += k
        return out

    def normals(self, rows):
        return ndtri(self.uniforms(rows, 1)[:, 0] + _HALF_ULP)

    def exponentials(self, rows, rate):
        return -np.log1p(-self.uniforms(rows, 1)[:, 0]) / rate

    def draw(self, rows_map):
        """Adapter for ``kernels.sample_marks``: local row indices mapped to path indices."""
        rows_map = np.asarray(rows_map, dtype=np.int64)
        return lambda rows, k: self.uniforms(rows_map[rows], k)
