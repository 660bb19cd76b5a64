"""RSSI propagation maps: log-distance mean, Gaussian perturbation prior,
full parameter vector, and the observation density.

Each access point j has an expected-signal map F_j over the grid, decomposed
as F_{j,x} = c1_j + c2_j * log||x - O_j|| + delta_{j,x} (natural log). The
perturbation fields delta_j carry a smooth Gaussian prior with covariance
v1 * exp(-||x - x'||^2 / v2). Observations are the map values at the current
cell plus iid N(0, sigma2) noise per AP, with an optional visibility mask.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import GridMap, ParameterError, SingularGeometryError, _freeze

LOG_2PI = math.log(2.0 * math.pi)


def friis_mean(c1_j: float, c2_j: float, x, o_j) -> float:
    """Log-distance path-loss mean c1 + c2 * ln||x - O_j|| (dBm)."""
    d = math.hypot(float(x[0]) - float(o_j[0]), float(x[1]) - float(o_j[1]))
    if d <= 0.0:
        raise SingularGeometryError("zero distance between cell and AP")
    return c1_j + c2_j * math.log(d)


class PerturbationPrior:
    """Zero-mean Gaussian prior for the per-AP perturbation fields.

    The covariance over cells is v1 * exp(-||x - x'||^2 / v2) plus a diagonal
    ridge jitter_scale * v1 (the smooth kernel's Gram matrix is numerically
    rank-deficient on regular grids). One matrix serves every AP; fields are
    drawn independently per AP. The Cholesky factor and the precision matrix
    are cached at construction.
    """

    def __init__(self, grid: GridMap, v1: float, v2: float, jitter_scale: float = 1e-6):
        if not (v1 > 0 and v2 > 0):
            raise ParameterError("v1 and v2 must be positive")
        self.grid = grid
        self.v1 = float(v1)
        self.v2 = float(v2)
        self.jitter = float(jitter_scale) * float(v1)
        sq = grid.pairwise_sq_distances()
        cov = v1 * np.exp(-sq / v2)
        cov[np.diag_indices_from(cov)] += self.jitter
        self.cov = _freeze(cov)
        self.chol = _freeze(np.linalg.cholesky(cov))  # raises if not SPD
        eye = np.eye(grid.n_cells)
        sol = np.linalg.solve(self.chol, eye)
        self.precision = _freeze(sol.T @ sol)  # (L L^T)^-1

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def log_density_unnormalized(self, delta: np.ndarray) -> float:
        """log pi(delta) up to the normalizing constant, via the precision."""
        delta = np.atleast_2d(delta)
        return float(-0.5 * np.einsum("jx,xy,jy->", delta, self.precision, delta))

    def log_density_unnormalized_chol(self, delta: np.ndarray) -> float:
        """Same quantity through a triangular solve (cross-check route)."""
        delta = np.atleast_2d(delta)
        z = np.linalg.solve(self.chol, delta.T)
        return float(-0.5 * np.sum(z * z))

    def sample(self, rng: np.random.Generator, n_aps: int | None = None) -> np.ndarray:
        """Draw independent fields delta_j = L z, one row per AP."""
        b = self.grid.n_aps if n_aps is None else int(n_aps)
        z = rng.standard_normal((self.n_cells, b))
        return (self.chol @ z).T


def sample_perturbation(prior: PerturbationPrior, rng: np.random.Generator) -> np.ndarray:
    """Sample a (B, C) perturbation matrix from the prior."""
    return prior.sample(rng)


@dataclass(frozen=True)
class Theta:
    """Full parameter vector (c1, c2, delta, sigma2) with the derived maps F.

    F is computed once at construction from the grid's log-distances and kept
    alongside the raw parameters; `recompute_maps` reproduces it to 1e-12.
    """

    c1: np.ndarray
    c2: np.ndarray
    delta: np.ndarray
    sigma2: float
    F: np.ndarray = field(init=False, repr=False)
    _grid: GridMap = field(init=False, repr=False)

    def __init__(self, grid: GridMap, c1, c2, delta, sigma2: float):
        if not (sigma2 > 0):
            raise ParameterError(f"sigma2 must be positive, got {sigma2}")
        b, c = grid.n_aps, grid.n_cells
        c1 = np.broadcast_to(np.asarray(c1, dtype=np.float64), (b,)).copy()
        c2 = np.broadcast_to(np.asarray(c2, dtype=np.float64), (b,)).copy()
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (b, c):
            raise ParameterError(f"delta must be ({b}, {c}), got {delta.shape}")
        object.__setattr__(self, "c1", _freeze(c1))
        object.__setattr__(self, "c2", _freeze(c2))
        object.__setattr__(self, "delta", _freeze(delta))
        object.__setattr__(self, "sigma2", float(sigma2))
        object.__setattr__(self, "_grid", grid)
        object.__setattr__(self, "F", _freeze(self.recompute_maps()))

    @property
    def grid(self) -> GridMap:
        return self._grid

    @property
    def n_aps(self) -> int:
        return self.c1.shape[0]

    def recompute_maps(self) -> np.ndarray:
        """F_{j,x} = c1_j + c2_j * log||x - O_j|| + delta_{j,x}."""
        return self.c1[:, None] + self.c2[:, None] * self._grid.log_distances + self.delta

    def replace(self, c1=None, c2=None, delta=None, sigma2=None) -> "Theta":
        return Theta(
            self._grid,
            self.c1 if c1 is None else c1,
            self.c2 if c2 is None else c2,
            self.delta if delta is None else delta,
            self.sigma2 if sigma2 is None else sigma2,
        )

    @classmethod
    def from_maps(cls, grid: GridMap, F: np.ndarray, sigma2: float) -> "Theta":
        """Wrap precomputed maps (c1 = c2 = 0, delta = F)."""
        return cls(grid, 0.0, 0.0, np.asarray(F, dtype=np.float64), sigma2)


def emission_logdensity(theta: Theta, x: int, y: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Gaussian log-density of observation y at cell x, masked APs excluded.

    With a full mask this is the model's observation density; with a partial
    mask the product runs over visible APs only. An empty mask contributes a
    flat likelihood (returns 0.0) and warns, since such a record carries no
    position information.
    """
    y = np.asarray(y, dtype=np.float64)
    if mask is None:
        mask = np.ones(y.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("observation with empty visibility mask; flat likelihood", stacklevel=2)
        return 0.0
    resid = y[mask] - theta.F[mask, x]
    m = resid.shape[0]
    with np.errstate(over="ignore"):
        return float(-0.5 * m * (LOG_2PI + math.log(theta.sigma2)) - 0.5 * np.dot(resid, resid) / theta.sigma2)


def emission_logdensity_cells(theta: Theta, cells: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Vectorized emission log-density over an array of cell indices."""
    y = np.asarray(y, dtype=np.float64)
    if mask is None:
        mask = np.ones(y.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    cells = np.asarray(cells, dtype=np.int64)
    if not mask.any():
        return np.zeros(cells.shape[0], dtype=np.float64)
    resid = y[mask, None] - theta.F[np.flatnonzero(mask)[:, None], cells[None, :]]
    m = int(mask.sum())
    with np.errstate(over="ignore"):
        return -0.5 * m * (LOG_2PI + math.log(theta.sigma2)) - 0.5 * np.sum(resid * resid, axis=0) / theta.sigma2
