"""Ground-truth simulation: trajectories, perturbation maps, RSSI streams.

All sampling goes through explicit numpy Generators. Trajectory, observation
noise and visibility masks each consume their own child stream spawned from
the caller's generator, so masking is independent of the signal values by
construction and every piece is reproducible in isolation.
"""

from __future__ import annotations

import numpy as np

from .grid import GridMap, TransitionKernel
from .observations import ObservationRecord
from .propagation import PerturbationPrior, Theta


def uniform_init(n_cells: int) -> np.ndarray:
    return np.full(n_cells, 1.0 / n_cells)


def simulate_trajectory(kernel: TransitionKernel, length: int, rng: np.random.Generator,
                        init: np.ndarray | None = None) -> np.ndarray:
    """Sample X_1 ~ init (uniform by default), X_{t+1} ~ q(X_t, .)."""
    n = kernel.n_cells
    nu = uniform_init(n) if init is None else np.asarray(init, dtype=np.float64)
    path = np.empty(length, dtype=np.int64)
    path[0] = min(int(np.searchsorted(np.cumsum(nu), rng.random(), side="right")), n - 1)
    u = rng.random(length - 1)
    for t in range(1, length):
        path[t] = np.searchsorted(kernel.row_cdf[path[t - 1]], u[t - 1], side="right")
        if path[t] == n:
            path[t] = n - 1
    return path


def simulate_observations(truth: np.ndarray, theta_star: Theta, rng: np.random.Generator,
                          visibility=None, grid: GridMap | None = None,
                          noise_sigma2: float | None = None) -> list[ObservationRecord]:
    """RSSI stream y_t = F*[:, x_t] + eps_t with optional visibility masking.

    Masked entries are stored as NaN; the clean values never leave this
    function. Noise and masks use separate child generators. `noise_sigma2`
    overrides theta's variance (0.0 gives a noiseless stream; Theta itself
    requires a positive variance).
    """
    grid = theta_star.grid if grid is None else grid
    b = theta_star.n_aps
    noise_rng, mask_rng = rng.spawn(2)
    sigma = float(np.sqrt(theta_star.sigma2 if noise_sigma2 is None else noise_sigma2))
    records = []
    for t, x in enumerate(truth, start=1):
        y = theta_star.F[:, x] + sigma * noise_rng.standard_normal(b)
        mask = np.ones(b, dtype=bool) if visibility is None else visibility(mask_rng, int(x), grid)
        y = y.copy()
        y[~mask] = np.nan
        records.append(ObservationRecord(t=t, y=y, mask=mask,
                                         truth=(int(grid.cells[x, 0]), int(grid.cells[x, 1]))))
    return records


def simulate_dataset(grid: GridMap, kernel: TransitionKernel, prior: PerturbationPrior,
                     c1, c2, sigma2: float, length: int, seed,
                     visibility=None) -> tuple[Theta, np.ndarray, list[ObservationRecord]]:
    """Draw (theta*, trajectory, observation stream) for one experiment run.

    theta*'s perturbation fields are sampled from the prior; c1, c2, sigma2
    are the fixed true coefficients. Child streams: 0 -> delta*, 1 ->
    trajectory, 2 -> observations.
    """
    root = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    delta_rng, traj_rng, obs_rng = root.spawn(3)
    delta_star = prior.sample(delta_rng, n_aps=grid.n_aps)
    theta_star = Theta(grid, c1, c2, delta_star, sigma2)
    truth = simulate_trajectory(kernel, length, traj_rng)
    records = simulate_observations(truth, theta_star, obs_rng, visibility=visibility, grid=grid)
    return theta_star, truth, records
