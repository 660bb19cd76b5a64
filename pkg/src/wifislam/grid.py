"""Grid geometry and the Gaussian random-walk transition kernel.

The environment is a finite set of integer 2-D cells. A mobile device moves
on the cells as a Markov chain whose transition weights decay with squared
euclidean distance, q(x, x') proportional to exp(-||x - x'||^2 / a), rows
normalized over the whole grid (full support by default).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class SingularGeometryError(ValueError):
    """An access point sits exactly on a cell center (log-distance undefined)."""


class ParameterError(ValueError):
    """A model parameter is outside its admissible range."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridMap:
    """Finite cell set plus known access-point positions.

    Attributes
    ----------
    width, height : int
        Cell counts along each axis; the cell list must cover width*height
        distinct integer coordinates.
    cells : (C, 2) int array
        Ordered cell coordinates. Cell i is referred to by its index i.
    ap_positions : (B, 2) float array
        Access-point coordinates O_j. Positions outside the cell bounding
        box only warn; a position exactly on a cell center is rejected
        because the log-distance mean is singular there.
    """

    width: int
    height: int
    cells: np.ndarray
    ap_positions: np.ndarray
    distances: np.ndarray = field(init=False, repr=False)
    log_distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        aps = np.atleast_2d(np.asarray(self.ap_positions, dtype=np.float64))
        if cells.ndim != 2 or cells.shape[1] != 2:
            raise ParameterError("cells must be an (C, 2) array of integer coordinates")
        if aps.shape[1] != 2:
            raise ParameterError("ap_positions must be (B, 2)")
        if cells.shape[0] != self.width * self.height:
            raise ParameterError(
                f"expected {self.width * self.height} cells, got {cells.shape[0]}"
            )
        if len(np.unique(cells, axis=0)) != cells.shape[0]:
            raise ParameterError("cell coordinates must be unique")

        lo, hi = cells.min(axis=0), cells.max(axis=0)
        if np.any(aps < lo - 1e-12) or np.any(aps > hi + 1e-12):
            warnings.warn("some AP positions lie outside the grid bounding box", stacklevel=2)

        # (B, C) euclidean distances from every AP to every cell center
        diff = aps[:, None, :] - cells[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        if np.any(dist < 1e-9):
            j, x = np.argwhere(dist < 1e-9)[0]
            raise SingularGeometryError(
                f"AP {j} coincides with cell {x} at {cells[x]}; log-distance is singular"
            )
        object.__setattr__(self, "cells", _freeze(cells))
        object.__setattr__(self, "ap_positions", _freeze(aps))
        object.__setattr__(self, "distances", _freeze(dist))
        object.__setattr__(self, "log_distances", _freeze(np.log(dist)))

    @classmethod
    def regular(cls, width: int, height: int, ap_positions) -> "GridMap":
        """Full rectangular grid {0..width-1} x {0..height-1}."""
        xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
        cells = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return cls(width, height, cells, np.asarray(ap_positions, dtype=np.float64))

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_aps(self) -> int:
        return self.ap_positions.shape[0]

    def cell_index(self, coord) -> int:
        """Index of the cell with the given integer coordinates."""
        hit = np.flatnonzero((self.cells == np.asarray(coord)).all(axis=1))
        if hit.size == 0:
            raise KeyError(f"no cell at {coord}")
        return int(hit[0])

    def pairwise_sq_distances(self) -> np.ndarray:
        d = self.cells[:, None, :] - self.cells[None, :, :]
        return np.sum(d * d, axis=2).astype(np.float64)


@dataclass(frozen=True)
class TransitionKernel:
    """Row-stochastic transition matrix with cached per-row sampling CDFs."""

    a: float
    q: np.ndarray
    row_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        sums = q.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-12):
            raise ParameterError("transition rows must sum to 1")
        object.__setattr__(self, "q", _freeze(q))
        object.__setattr__(self, "row_cdf", _freeze(np.cumsum(q, axis=1)))

    @property
    def n_cells(self) -> int:
        return self.q.shape[0]

    def sample_rows(self, cells: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draws from q(cells[i], .) using uniforms u[i]."""
        out = np.empty(len(cells), dtype=np.int64)
        for c in np.unique(cells):
            idx = np.flatnonzero(cells == c)
            out[idx] = np.searchsorted(self.row_cdf[c], u[idx], side="right")
        return np.minimum(out, self.q.shape[0] - 1)

    def stationary(self, tol: float = 1e-14, max_iter: int = 200_000) -> np.ndarray:
        """Stationary distribution by power iteration (diagnostic)."""
        pi = np.full(self.n_cells, 1.0 / self.n_cells)
        for _ in range(max_iter):
            nxt = pi @ self.q
            if np.max(np.abs(nxt - pi)) < tol:
                return nxt
            pi = nxt
        return pi


def build_transition(grid: GridMap, a: float, cutoff_radius: float | None = None) -> TransitionKernel:
    """Build q(x, x') proportional to exp(-||x - x'||^2 / a).

    Rows are normalized over the full grid. `cutoff_radius` (grid units)
    optionally zeroes weights beyond that distance before normalizing; it is
    an off-by-default speed knob, not part of the model.
    """
    if not (a > 0):
        raise ParameterError(f"transition spread a must be positive, got {a}")
    sq = grid.pairwise_sq_distances()
    w = np.exp(-sq / a)
    if cutoff_radius is not None:
        w[sq > cutoff_radius**2] = 0.0
    rows = w.sum(axis=1, keepdims=True)
    if np.any(rows == 0.0):
        raise ParameterError("transition row underflowed to zero; increase a or cutoff")
    return TransitionKernel(a=float(a), q=w / rows)
