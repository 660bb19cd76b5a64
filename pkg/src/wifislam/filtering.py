"""Exact HMM filtering and the bootstrap particle filter.

The exact recursions serve as oracles on small grids; the particle filter is
the production path. Weights are handled in log space with max-subtraction
throughout (17 APs with sigma2-driven residuals underflow a naive product).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import TransitionKernel
from .propagation import Theta, emission_logdensity_cells


class FilterUnderflowError(FloatingPointError):
    """Every cell's posterior weight underflowed to zero."""


def _bayes_update(prior: np.ndarray, theta: Theta, y, mask) -> np.ndarray:
    logg = emission_logdensity_cells(theta, np.arange(prior.shape[0]), y, mask)
    logg = np.where(prior > 0, logg, -np.inf)  # avoid 0 * exp(huge) = nan off-support
    m = np.max(logg)
    if not np.isfinite(m):
        raise FilterUnderflowError("posterior underflowed: no prior mass or degenerate emission")
    w = prior * np.exp(logg - m)
    s = w.sum()
    if s <= 0.0 or not np.isfinite(s):
        raise FilterUnderflowError("posterior underflowed after emission weighting")
    return w / s


def exact_filter_init(nu: np.ndarray, theta: Theta, y, mask=None) -> np.ndarray:
    """phi_1(x) = nu(x) g(x, y_1) / normalizer."""
    nu = np.asarray(nu, dtype=np.float64)
    return _bayes_update(nu, theta, y, mask)


def exact_filter_step(phi_prev: np.ndarray, kernel: TransitionKernel, theta: Theta,
                      y, mask=None) -> np.ndarray:
    """One predict-update sweep: phi_t proportional to (phi_{t-1} q) g(., y_t)."""
    pred = phi_prev @ kernel.q
    return _bayes_update(pred, theta, y, mask)


@dataclass
class ExactFilter:
    """Stateful wrapper around the exact recursions (position oracle)."""

    kernel: TransitionKernel
    theta: Theta
    nu: np.ndarray
    phi: np.ndarray | None = None
    t: int = 0

    def step(self, y, mask=None) -> np.ndarray:
        if self.t == 0:
            self.phi = exact_filter_init(self.nu, self.theta, y, mask)
        else:
            self.phi = exact_filter_step(self.phi, self.kernel, self.theta, y, mask)
        self.t += 1
        return self.phi

    def mean_position(self, cells: np.ndarray) -> np.ndarray:
        return self.phi @ cells

    def map_position(self) -> int:
        return int(np.argmax(self.phi))


@dataclass
class ParticleSystem:
    """Weighted particle cloud with attached auxiliary statistics.

    The per-particle statistic vectors rho are stored as shared rows:
    `rho_rows[rho_map[p]]` is particle p's vector. Particles sharing a cell
    share a row whenever their statistics are equal (which the recursion
    preserves), so the dense (N, dim) matrix is materialized only on demand
    through the `rho` property.
    """

    cells: np.ndarray
    weights: np.ndarray
    rng: np.random.Generator
    ancestors: np.ndarray | None = None
    rho_rows: np.ndarray | None = None
    rho_map: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.cells.shape != self.weights.shape:
            raise ValueError("cells and weights must have equal length")

    @property
    def n_particles(self) -> int:
        return self.cells.shape[0]

    @property
    def rho(self) -> np.ndarray | None:
        if self.rho_rows is None:
            return None
        return self.rho_rows[self.rho_map]

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def reset_rho(self, dim: int) -> None:
        """Zero the auxiliary statistics (block boundary)."""
        self.rho_rows = np.zeros((1, dim))
        self.rho_map = np.zeros(self.n_particles, dtype=np.int64)


def init_particle_system(n_particles: int, n_cells: int, rng: np.random.Generator,
                         stat_dim: int | None = None, nu: np.ndarray | None = None) -> ParticleSystem:
    """Uniform (or nu-distributed) particles with equal weights."""
    if nu is None:
        cells = rng.integers(0, n_cells, size=n_particles)
    else:
        cdf = np.cumsum(np.asarray(nu, dtype=np.float64))
        cells = np.minimum(np.searchsorted(cdf, rng.random(n_particles), side="right"), n_cells - 1)
    sys = ParticleSystem(cells=cells, weights=np.full(n_particles, 1.0 / n_particles), rng=rng)
    if stat_dim is not None:
        sys.reset_rho(stat_dim)
    return sys


def bootstrap_filter_recursion(prev: ParticleSystem, kernel: TransitionKernel, y, theta: Theta,
                               mask=None, resampling: str = "multinomial") -> ParticleSystem:
    """One step of the bootstrap filter.

    Multinomial resampling every step (the algorithm's literal scheme), then
    propagation through the transition kernel and reweighting by the emission
    density. `resampling="systematic"` swaps in low-variance resampling as an
    experimental option. Resampling indices are recorded on the returned
    system for the statistic recursion; the new system carries no statistics
    until the caller attaches them.
    """
    n = prev.n_particles
    rng = prev.rng
    cum = np.cumsum(prev.weights)
    if resampling == "multinomial":
        u = rng.random(n)
    elif resampling == "systematic":
        u = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {resampling!r}")
    ancestors = np.minimum(np.searchsorted(cum, u, side="right"), n - 1)
    new_cells = kernel.sample_rows(prev.cells[ancestors], rng.random(n))
    logw = emission_logdensity_cells(theta, new_cells, y, mask)
    m = np.max(logw)
    flags = {}
    if not np.isfinite(m):
        weights = np.full(n, 1.0 / n)
        flags["uniform_fallback"] = True
    else:
        w = np.exp(logw - m)
        weights = w / w.sum()
    return ParticleSystem(cells=new_cells, weights=weights, rng=rng, ancestors=ancestors,
                          flags=flags)


def map_position_estimate(system: ParticleSystem) -> int:
    """Cell of the maximum-weight particle; ties go to the lowest index."""
    if system.n_particles == 0:
        raise ValueError("empty particle system")
    return int(system.cells[int(np.argmax(system.weights))])


def posterior_mean_position(system: ParticleSystem, cells: np.ndarray) -> np.ndarray:
    """Weighted mean of particle coordinates (diagnostic estimator)."""
    return system.weights @ cells[system.cells]
