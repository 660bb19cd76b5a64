"""Sufficient-statistic layout shared by the exact and particle recursions.

Three statistic families drive the M-step, all functions of the current cell
x and observation y only:

    s1_j(x)    one-hot occupancy over cells
    s2_j(x,y)  occupancy scaled by y_j
    s3_j(y)    y_j squared

They are stored flattened per AP as B contiguous blocks [s1_j | s2_j | s3_j]
of width 2C+1. Full-visibility runs carry B identical s1_j copies; the
per-AP partial-observation mode reuses the exact same layout (and therefore
the exact same array shapes and arithmetic), which is what makes the two
runner modes agree bit for bit on fully visible streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StatLayout:
    n_cells: int
    n_aps: int

    @property
    def block(self) -> int:
        """Width of one AP's block."""
        return 2 * self.n_cells + 1

    @property
    def dim(self) -> int:
        return self.n_aps * self.block

    def s1_cols(self, j: int) -> slice:
        o = j * self.block
        return slice(o, o + self.n_cells)

    def s2_cols(self, j: int) -> slice:
        o = j * self.block + self.n_cells
        return slice(o, o + self.n_cells)

    def s3_col(self, j: int) -> int:
        return j * self.block + 2 * self.n_cells

    def increment(self, x: int, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """s(x, y) as a flat row; unobserved APs contribute zeros."""
        row = np.zeros(self.dim)
        for j in np.flatnonzero(mask):
            o = j * self.block
            row[o + x] = 1.0
            row[o + self.n_cells + x] = y[j]
            row[o + 2 * self.n_cells] = y[j] * y[j]
        return row

    def increment_cells(self, cells: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Stacked s(x, y) rows for an array of cells (vectorized)."""
        rows = np.zeros((len(cells), self.dim))
        r = np.arange(len(cells))
        for j in np.flatnonzero(mask):
            o = j * self.block
            rows[r, o + cells] = 1.0
            rows[r, o + self.n_cells + cells] = y[j]
            rows[:, o + 2 * self.n_cells] = y[j] * y[j]
        return rows

    def blend_coefficients(self, m_counts: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-column factors for one recursion step.

        Returns (keep, gain): the transported statistic is scaled by `keep`
        and the new increment by `gain`. Observed AP j uses its within-block
        count m_j: keep = 1 - 1/m_j, gain = 1/m_j (m counted including the
        current step, so the first observation replaces the zero reset).
        Unobserved APs are transported unchanged (keep = 1, gain = 0).
        """
        keep = np.ones(self.dim)
        gain = np.zeros(self.dim)
        for j in np.flatnonzero(observed):
            inv = 1.0 / m_counts[j]
            sl = slice(j * self.block, (j + 1) * self.block)
            keep[sl] = 1.0 - inv
            gain[sl] = inv
        return keep, gain


@dataclass
class SufficientStats:
    """Block-averaged statistics (S1, S2, S3) in per-AP form.

    s1, s2 have shape (B, C); s3 has shape (B,). n_weight is the observation
    count behind each AP's average: a scalar in full-visibility mode, a (B,)
    vector when APs are observed at different rates.
    """

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    n_weight: np.ndarray | float

    @classmethod
    def zeros(cls, layout: StatLayout) -> "SufficientStats":
        return cls(
            s1=np.zeros((layout.n_aps, layout.n_cells)),
            s2=np.zeros((layout.n_aps, layout.n_cells)),
            s3=np.zeros(layout.n_aps),
            n_weight=0.0,
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, layout: StatLayout, n_weight) -> "SufficientStats":
        b, c = layout.n_aps, layout.n_cells
        blocks = np.asarray(vec, dtype=np.float64).reshape(b, layout.block)
        return cls(s1=blocks[:, :c].copy(), s2=blocks[:, c:2 * c].copy(),
                   s3=blocks[:, 2 * c].copy(), n_weight=n_weight)

    @classmethod
    def from_shared(cls, s1: np.ndarray, s2: np.ndarray, s3: np.ndarray, n_weight) -> "SufficientStats":
        """Build from a single shared occupancy vector (full-visibility form)."""
        s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
        b = s2.shape[0]
        s1 = np.tile(np.asarray(s1, dtype=np.float64), (b, 1))
        return cls(s1=s1, s2=s2.copy(), s3=np.atleast_1d(np.asarray(s3, dtype=np.float64)).copy(),
                   n_weight=n_weight)

    def to_vector(self, layout: StatLayout) -> np.ndarray:
        vec = np.empty(layout.dim)
        for j in range(layout.n_aps):
            vec[layout.s1_cols(j)] = self.s1[j]
            vec[layout.s2_cols(j)] = self.s2[j]
            vec[layout.s3_col(j)] = self.s3[j]
        return vec

    @property
    def n_aps(self) -> int:
        return self.s1.shape[0]

    @property
    def n_cells(self) -> int:
        return self.s1.shape[1]

    def s1_shared(self, atol: float = 1e-9) -> np.ndarray:
        """The shared occupancy vector; requires all per-AP copies to agree."""
        ref = self.s1[0]
        if not np.allclose(self.s1, ref[None, :], atol=atol):
            raise ValueError("per-AP occupancy vectors differ; no shared S1 in partial mode")
        return ref

    def validate_full_visibility(self, atol: float = 1e-10) -> None:
        s1 = self.s1_shared()
        if np.any(s1 < -atol) or np.any(s1 > 1 + atol):
            raise ValueError("S1 entries must lie in [0, 1]")
        if abs(float(s1.sum()) - 1.0) > atol:
            raise ValueError(f"S1 must sum to 1, got {s1.sum()!r}")
        if np.any(self.s3 < 0):
            raise ValueError("S3 entries must be nonnegative")
