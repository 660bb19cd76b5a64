"""Forward-only recursions for the block sufficient statistics.

rho_t(x) is the conditional expectation, given observations up to t and the
current state x, of the running average of the per-step statistics since the
block started. It propagates through the backward kernel of the filter: each
step blends the transported previous value (factor 1 - 1/m) with the new
increment (factor 1/m), m being the within-block step count. With m = 1 the
update reduces to rho = s, so resetting rho to zero at a block boundary and
counting from 1 reproduces the exact block time-average (every step weighted
1/m at block end).

The particle version evaluates the same blend at the particle locations,
averaging over all N previous particles with weights w_{t-1} q(xi_{t-1},
xi_t). Both q and the statistic depend on a particle only through its cell,
so previous particles are grouped by (cell, statistic-row) and the blend is
computed once per group; this is algebraically identical to the per-particle
sum at O(U^2) <= O(N^2) cost.
"""

from __future__ import annotations

import numpy as np

from .filtering import ParticleSystem
from .grid import TransitionKernel
from .propagation import Theta
from .stats import StatLayout, SufficientStats
from .filtering import exact_filter_init, exact_filter_step


def rho_update_exact(rho_prev: np.ndarray, phi_prev: np.ndarray, kernel: TransitionKernel,
                     increment: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """One exact recursion step (t >= 2).

    `increment` holds s(x, y_t) per current cell, shape (C, dim); the
    statistic families here do not depend on the previous state. Returns the
    new (C, dim) rho and the indices of cells with zero predictive mass,
    whose rho is set to 0 (they cannot influence the filter-weighted sums).
    """
    pred = phi_prev[:, None] * kernel.q  # (x', x)
    denom = pred.sum(axis=0)
    ok = denom > 0.0
    backward = np.zeros_like(pred)
    backward[:, ok] = pred[:, ok] / denom[ok]
    transported = backward.T @ rho_prev
    rho = (1.0 / t) * increment + (1.0 - 1.0 / t) * transported
    rho[~ok] = 0.0
    return rho, np.flatnonzero(~ok)


class ExactSmoother:
    """Joint exact filter + statistic recursion (oracle driver).

    Runs phi and rho over an observation stream with full-visibility
    statistics; `reset_block` zeroes rho and the within-block counter while
    the filter keeps running, mirroring the block runner's bookkeeping.
    """

    def __init__(self, kernel: TransitionKernel, theta: Theta, nu: np.ndarray, layout: StatLayout):
        self.kernel = kernel
        self.theta = theta
        self.nu = np.asarray(nu, dtype=np.float64)
        self.layout = layout
        self.phi: np.ndarray | None = None
        self.rho = np.zeros((kernel.n_cells, layout.dim))
        self.m = 0
        self.zero_mass_events = 0

    def reset_block(self) -> None:
        self.rho[:] = 0.0
        self.m = 0

    def step(self, y, mask=None) -> None:
        mask_arr = np.ones(self.layout.n_aps, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        cells = np.arange(self.kernel.n_cells)
        inc = self.layout.increment_cells(cells, np.asarray(y, dtype=np.float64), mask_arr)
        self.m += 1
        if self.m == 1:
            self.rho = inc
        else:
            self.rho, flagged = rho_update_exact(self.rho, self.phi, self.kernel, inc, self.m)
            self.zero_mass_events += len(flagged)
        if self.phi is None:
            self.phi = exact_filter_init(self.nu, self.theta, y, mask)
        else:
            self.phi = exact_filter_step(self.phi, self.kernel, self.theta, y, mask)

    def smoothed_statistic(self) -> np.ndarray:
        """Filter-weighted statistic sum_x phi(x) rho(x), shape (dim,)."""
        return self.phi @ self.rho

    def finalize(self) -> SufficientStats:
        stats = SufficientStats.from_vector(self.smoothed_statistic(), self.layout, float(self.m))
        self.reset_block()
        return stats


def _blend_groups(prev: ParticleSystem, new_cells: np.ndarray, ancestors: np.ndarray,
                  kernel: TransitionKernel, layout: StatLayout, y: np.ndarray,
                  mask: np.ndarray, m_counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Grouped evaluation of the particle blend; returns (rows, row_map, n_degenerate)."""
    n_cells = kernel.n_cells
    keys = prev.rho_map * n_cells + prev.cells
    u_keys, g_inv = np.unique(keys, return_inverse=True)
    g_w = np.bincount(g_inv, weights=prev.weights, minlength=len(u_keys))
    g_cells = u_keys % n_cells
    g_rows_idx = u_keys // n_cells

    uc, c_inv = np.unique(new_cells, return_inverse=True)
    wq = g_w[:, None] * kernel.q[np.ix_(g_cells, uc)]
    denom = wq.sum(axis=0)
    ok = denom > 0.0

    backward = wq[:, ok] / denom[ok]  # (G, U_ok), columns sum to 1
    n_rows_prev = prev.rho_rows.shape[0]
    if n_rows_prev == len(u_keys) and np.array_equal(g_rows_idx, np.arange(n_rows_prev)):
        row_w = backward  # groups already keyed one-to-one by row
    else:
        row_w = np.zeros((n_rows_prev, backward.shape[1]))
        np.add.at(row_w, g_rows_idx, backward)

    # with every AP sharing one within-block count the transport factor is a
    # scalar and can be folded into the small weight matrix instead of a
    # full-width pass over the statistic columns
    uniform = mask.all() and np.all(m_counts == m_counts[0])
    if uniform:
        alpha = 1.0 - 1.0 / m_counts[0]
        rows_ok = (row_w * alpha).T @ prev.rho_rows
    else:
        keep, _ = layout.blend_coefficients(m_counts, mask)
        rows_ok = row_w.T @ prev.rho_rows
        rows_ok *= keep

    # add the scaled increments in place (one-hot structure per AP block)
    ok_cells = uc[ok]
    rr = np.arange(len(ok_cells))
    for j in np.flatnonzero(mask):
        o = j * layout.block
        inv_m = 1.0 / m_counts[j]
        rows_ok[rr, o + ok_cells] += inv_m
        rows_ok[rr, o + n_cells + ok_cells] += inv_m * y[j]
        rows_ok[:, o + 2 * n_cells] += inv_m * (y[j] * y[j])

    if ok.all():
        # common path: one row per unique new cell
        return rows_ok, c_inv.astype(np.int64), 0

    # degenerate kernel: particles landing on zero-mass cells copy their
    # ancestor's blend instead
    keep, gain = layout.blend_coefficients(m_counts, mask)
    inc = layout.increment_cells(uc, y, mask)
    cell_to_row = np.full(len(uc), -1, dtype=np.int64)
    cell_to_row[ok] = np.arange(int(ok.sum()))
    extra_rows = []
    row_map = np.empty(len(new_cells), dtype=np.int64)
    next_row = int(ok.sum())
    for p in range(len(new_cells)):
        r = cell_to_row[c_inv[p]]
        if r >= 0:
            row_map[p] = r
        else:
            anc_row = prev.rho_rows[prev.rho_map[ancestors[p]]]
            extra_rows.append(keep * anc_row + gain * inc[c_inv[p]])
            row_map[p] = next_row
            next_row += 1
    rows = np.vstack([rows_ok] + extra_rows) if extra_rows else rows_ok
    return rows, row_map, len(extra_rows)


def advance_rho(prev: ParticleSystem, new_system: ParticleSystem, kernel: TransitionKernel,
                layout: StatLayout, y, mask, m_counts: np.ndarray) -> int:
    """Attach the updated statistics to `new_system`; returns the number of
    particles that required the degenerate-kernel fallback."""
    rows, row_map, n_deg = _blend_groups(
        prev, new_system.cells, new_system.ancestors, kernel, layout,
        np.asarray(y, dtype=np.float64), np.asarray(mask, dtype=bool), m_counts)
    new_system.rho_rows = rows
    new_system.rho_map = row_map
    return n_deg


def rho_update_particle(prev: ParticleSystem, new_cells, ancestors, kernel: TransitionKernel,
                        layout: StatLayout, y, t: int, mask=None) -> np.ndarray:
    """Per-particle statistic update (full-visibility form of the blend).

    Returns the dense (N, dim) matrix of updated vectors, one per new
    particle, with the scalar within-block count t applied to every family.
    """
    mask_arr = np.ones(layout.n_aps, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m_counts = np.full(layout.n_aps, int(t))
    rows, row_map, _ = _blend_groups(prev, np.asarray(new_cells, dtype=np.int64),
                                     None if ancestors is None else np.asarray(ancestors, dtype=np.int64),
                                     kernel, layout, np.asarray(y, dtype=np.float64), mask_arr, m_counts)
    return rows[row_map]


def finalize_block_statistic(system: ParticleSystem, layout: StatLayout, n_weight,
                             reset: bool = True) -> SufficientStats:
    """Weight-average the particle statistics into block sufficient statistics.

    Optionally resets the system's statistics for the next block (the
    within-block counters are the caller's to reset).
    """
    g_w = np.bincount(system.rho_map, weights=system.weights, minlength=system.rho_rows.shape[0])
    vec = g_w @ system.rho_rows
    stats = SufficientStats.from_vector(vec, layout, n_weight)
    if reset:
        system.reset_rho(layout.dim)
    return stats
