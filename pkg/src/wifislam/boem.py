"""Block online EM runner with averaging and stabilization.

Two bootstrap particle systems advance together over the observation stream:
the block system under the current block estimate and a second system under
the averaged estimate, which is the one used for localization. Sufficient
statistics accumulate on the block system via the forward statistic
recursion; at block ends the closed-form penalized M-step refreshes the
block estimate, the running weighted average of block statistics refreshes
the averaged estimate, and every `stabilize_every` blocks the block estimate
is overwritten by the averaged one.

Block bookkeeping is per AP throughout: AP j's k-th block completes once it
has been observed tau_k times, its statistics and averaged statistics live
in per-AP columns, and only completing APs update their map parameters. On
fully visible streams every AP's counters advance in lockstep, so the
shared-schedule runner and the per-AP runner execute identical arithmetic;
they differ only in stream validation and the default variance policy
(estimated on full streams, held fixed at its initial value on partial ones).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .filtering import bootstrap_filter_recursion, init_particle_system, map_position_estimate
from .grid import ParameterError, TransitionKernel
from .metrics import localization_quantile, map_error
from .mstep import m_step
from .onlineem import advance_rho, finalize_block_statistic
from .propagation import PerturbationPrior, Theta
from .stats import StatLayout, SufficientStats


@dataclass(frozen=True)
class BlockSchedule:
    """Affine block-length rule tau_k = slope * k + intercept, k >= 1."""

    slope: float = 10.0
    intercept: float = 500.0

    def tau(self, k: int) -> int:
        v = int(round(self.slope * k + self.intercept))
        if v < 1:
            raise ParameterError(f"block length tau_{k} = {v} must be >= 1")
        return v

    def total(self, k: int) -> int:
        """T_k, the number of observations after k complete blocks."""
        return sum(self.tau(i) for i in range(1, k + 1))

    def blocks_for(self, n_obs: int) -> int:
        """Number of complete blocks contained in a stream of n_obs steps."""
        k, used = 0, 0
        while used + self.tau(k + 1) <= n_obs:
            k += 1
            used += self.tau(k)
        return k


def running_average(avg, t_prev: float, new, tau: float):
    """Block-weighted running mean: (T_prev * avg + tau * new) / (T_prev + tau)."""
    return (t_prev * avg + tau * new) / (t_prev + tau)


@dataclass
class RunnerOptions:
    n_particles: int = 25
    stabilize_every: int = 5  # N_b; 0 disables stabilization
    schedule: BlockSchedule = field(default_factory=BlockSchedule)
    estimate_sigma2: bool | None = None  # None -> mode default
    resampling: str = "multinomial"
    penalty_n_plus_one: bool = False
    mstep_tol: float = 1e-10
    mstep_max_sweeps: int = 100


@dataclass
class BlockRecord:
    """Snapshot written each time one or more AP blocks complete."""

    step: int                 # 0-based index into the stream
    t: int                    # record timestamp
    aps: np.ndarray           # APs whose block completed here
    k: np.ndarray             # their completed block indices
    n: np.ndarray             # actual observation counts behind the block
    total_obs: np.ndarray     # per-AP totals after this block
    sigma2_hat: float
    sigma2_tilde: float
    c1_hat: np.ndarray
    c2_hat: np.ndarray
    c1_tilde: np.ndarray
    c2_tilde: np.ndarray
    stabilized: bool
    partial: bool
    frozen_aps: tuple
    sigma2_clamped: bool
    map_err_hat: float | None = None
    map_err_tilde: float | None = None
    loc_q_hat: float | None = None
    loc_q_tilde: float | None = None

    @property
    def block_index(self) -> int:
        return int(self.k[0])


@dataclass
class RunTrace:
    grid: object
    mode: str
    cells_hat: np.ndarray
    cells_tilde: np.ndarray
    truth: np.ndarray          # (T, 2) float, nan where unknown
    dist_hat: np.ndarray
    dist_tilde: np.ndarray
    ess_hat: np.ndarray
    ess_tilde: np.ndarray
    block_of_step: np.ndarray  # smallest active block index at each step
    blocks: list[BlockRecord]
    theta_hat: Theta
    theta_tilde: Theta
    counters: dict
    never_observed_aps: tuple = ()

    @property
    def n_steps(self) -> int:
        return self.cells_hat.shape[0]

    def positions_hat(self) -> np.ndarray:
        return self.grid.cells[self.cells_hat]

    def positions_tilde(self) -> np.ndarray:
        return self.grid.cells[self.cells_tilde]


class _Engine:
    def __init__(self, kernel: TransitionKernel, prior: PerturbationPrior, theta0: Theta,
                 options: RunnerOptions, seed, mode: str, f_true: np.ndarray | None):
        if mode not in ("shared", "per_ap"):
            raise ParameterError(f"unknown runner mode {mode!r}")
        self.kernel = kernel
        self.prior = prior
        self.options = options
        self.mode = mode
        self.f_true = f_true
        grid = theta0.grid
        self.grid = grid
        b = grid.n_aps
        self.layout = StatLayout(grid.n_cells, b)
        self.estimate_sigma2 = options.estimate_sigma2
        if self.estimate_sigma2 is None:
            self.estimate_sigma2 = mode == "shared"

        root = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        hat_rng, tilde_rng = root.spawn(2)
        self.hat = init_particle_system(options.n_particles, grid.n_cells, hat_rng,
                                        stat_dim=self.layout.dim)
        self.tilde = init_particle_system(options.n_particles, grid.n_cells, tilde_rng)
        self.theta_hat = theta0
        self.theta_tilde = theta0

        self.m_counts = np.zeros(b, dtype=np.int64)
        self.k = np.ones(b, dtype=np.int64)
        self.tau_current = np.array([options.schedule.tau(1)] * b, dtype=np.int64)
        self.total_obs = np.zeros(b, dtype=np.float64)
        self.avg_s1 = np.zeros((b, grid.n_cells))
        self.avg_s2 = np.zeros((b, grid.n_cells))
        self.avg_s3 = np.zeros(b)
        self.ever_observed = np.zeros(b, dtype=bool)

        self.cells_hat: list[int] = []
        self.cells_tilde: list[int] = []
        self.ts: list[int] = []
        self.truth: list[tuple[float, float]] = []
        self.ess_hat: list[float] = []
        self.ess_tilde: list[float] = []
        self.block_of_step: list[int] = []
        self.events: list[BlockRecord] = []
        self.counters = {"empty_mask_steps": 0, "uniform_fallback_steps": 0,
                         "degenerate_backward_particles": 0, "observations": 0}

    def step(self, rec) -> None:
        y, mask = rec.y, rec.mask
        if self.mode == "shared" and not mask.all():
            raise ParameterError(
                "the shared-schedule runner requires fully visible observations; "
                "use the per-AP runner for masked streams")
        new_hat = bootstrap_filter_recursion(self.hat, self.kernel, y, self.theta_hat, mask,
                                             self.options.resampling)
        new_tilde = bootstrap_filter_recursion(self.tilde, self.kernel, y, self.theta_tilde,
                                               mask, self.options.resampling)
        if not mask.any():
            self.counters["empty_mask_steps"] += 1
        if new_hat.flags.get("uniform_fallback") or new_tilde.flags.get("uniform_fallback"):
            self.counters["uniform_fallback_steps"] += 1

        self.m_counts += mask
        self.ever_observed |= mask
        n_deg = advance_rho(self.hat, new_hat, self.kernel, self.layout, y, mask, self.m_counts)
        self.counters["degenerate_backward_particles"] += n_deg
        self.hat = new_hat
        self.tilde = new_tilde
        self.counters["observations"] += 1

        self.cells_hat.append(map_position_estimate(new_hat))
        self.cells_tilde.append(map_position_estimate(new_tilde))
        self.ts.append(rec.t)
        self.truth.append(rec.truth if rec.truth is not None else (np.nan, np.nan))
        self.ess_hat.append(new_hat.ess())
        self.ess_tilde.append(new_tilde.ess())
        self.block_of_step.append(int(self.k.min()))

        completing = np.flatnonzero(self.m_counts == self.tau_current)
        if completing.size:
            self._complete_blocks(completing, partial=False)

    def _complete_blocks(self, aps: np.ndarray, partial: bool) -> None:
        opts = self.options
        n_vec = self.m_counts.astype(np.float64)
        stats = finalize_block_statistic(self.hat, self.layout, n_vec.copy(), reset=False)

        res_hat = m_step(stats, n_vec, self.prior, self.theta_hat,
                         estimate_sigma2=self.estimate_sigma2,
                         penalty_n_plus_one=opts.penalty_n_plus_one,
                         ap_subset=aps, tol=opts.mstep_tol, max_sweeps=opts.mstep_max_sweeps)
        self.theta_hat = res_hat.theta

        # running weighted average of block statistics, per AP
        for j in aps:
            t_prev, tau_j = self.total_obs[j], n_vec[j]
            if self.k[j] == 1:
                self.avg_s1[j] = stats.s1[j]
                self.avg_s2[j] = stats.s2[j]
                self.avg_s3[j] = stats.s3[j]
            else:
                self.avg_s1[j] = running_average(self.avg_s1[j], t_prev, stats.s1[j], tau_j)
                self.avg_s2[j] = running_average(self.avg_s2[j], t_prev, stats.s2[j], tau_j)
                self.avg_s3[j] = running_average(self.avg_s3[j], t_prev, stats.s3[j], tau_j)
        avg_stats = SufficientStats(s1=self.avg_s1, s2=self.avg_s2, s3=self.avg_s3,
                                    n_weight=self.total_obs + n_vec)
        res_tilde = m_step(avg_stats, self.total_obs + n_vec, self.prior, self.theta_tilde,
                           estimate_sigma2=self.estimate_sigma2,
                           penalty_n_plus_one=opts.penalty_n_plus_one,
                           ap_subset=aps, tol=opts.mstep_tol, max_sweeps=opts.mstep_max_sweeps)
        self.theta_tilde = res_tilde.theta

        stabilized = False
        if opts.stabilize_every > 0:
            j_stab = aps[(self.k[aps] % opts.stabilize_every) == 0]
            if j_stab.size:
                c1 = self.theta_hat.c1.copy()
                c2 = self.theta_hat.c2.copy()
                delta = self.theta_hat.delta.copy()
                c1[j_stab] = self.theta_tilde.c1[j_stab]
                c2[j_stab] = self.theta_tilde.c2[j_stab]
                delta[j_stab] = self.theta_tilde.delta[j_stab]
                self.theta_hat = Theta(self.grid, c1, c2, delta, self.theta_tilde.sigma2)
                stabilized = True

        # zero the completed APs' statistic columns and counters
        for j in aps:
            self.hat.rho_rows[:, j * self.layout.block:(j + 1) * self.layout.block] = 0.0
        self.m_counts[aps] = 0
        if not self.m_counts.any():
            self.hat.reset_rho(self.layout.dim)

        event = BlockRecord(
            step=len(self.cells_hat) - 1,
            t=self.ts[-1],
            aps=aps.copy(),
            k=self.k[aps].copy(),
            n=n_vec[aps].copy(),
            total_obs=(self.total_obs + n_vec)[aps].copy(),
            sigma2_hat=self.theta_hat.sigma2,
            sigma2_tilde=self.theta_tilde.sigma2,
            c1_hat=self.theta_hat.c1.copy(),
            c2_hat=self.theta_hat.c2.copy(),
            c1_tilde=self.theta_tilde.c1.copy(),
            c2_tilde=self.theta_tilde.c2.copy(),
            stabilized=stabilized,
            partial=partial,
            frozen_aps=tuple(set(res_hat.frozen_aps) | set(res_tilde.frozen_aps)),
            sigma2_clamped=res_hat.sigma2_clamped or res_tilde.sigma2_clamped,
        )
        if self.f_true is not None:
            event.map_err_hat = map_error(self.theta_hat.F, self.f_true)
            event.map_err_tilde = map_error(self.theta_tilde.F, self.f_true)
        self.events.append(event)

        self.total_obs[aps] += n_vec[aps]
        self.k[aps] += 1
        for j in aps:
            self.tau_current[j] = opts.schedule.tau(int(self.k[j]))

    def finish(self) -> RunTrace:
        leftover = np.flatnonzero(self.m_counts > 0)
        if leftover.size:
            self._complete_blocks(leftover, partial=True)

        truth = np.asarray(self.truth, dtype=np.float64).reshape(-1, 2)
        cells_hat = np.asarray(self.cells_hat, dtype=np.int64)
        cells_tilde = np.asarray(self.cells_tilde, dtype=np.int64)
        coords = self.grid.cells
        with np.errstate(invalid="ignore"):
            dist_hat = np.linalg.norm(coords[cells_hat] - truth, axis=1)
            dist_tilde = np.linalg.norm(coords[cells_tilde] - truth, axis=1)

        # per-block localization quantiles over each completed window
        start = 0
        for ev in self.events:
            stop = ev.step + 1
            window = dist_hat[start:stop]
            if window.size and np.all(np.isfinite(window)):
                ev.loc_q_hat = localization_quantile(window)
                ev.loc_q_tilde = localization_quantile(dist_tilde[start:stop])
            start = stop

        return RunTrace(
            grid=self.grid,
            mode=self.mode,
            cells_hat=cells_hat,
            cells_tilde=cells_tilde,
            truth=truth,
            dist_hat=dist_hat,
            dist_tilde=dist_tilde,
            ess_hat=np.asarray(self.ess_hat),
            ess_tilde=np.asarray(self.ess_tilde),
            block_of_step=np.asarray(self.block_of_step, dtype=np.int64),
            blocks=self.events,
            theta_hat=self.theta_hat,
            theta_tilde=self.theta_tilde,
            counters=dict(self.counters),
            never_observed_aps=tuple(np.flatnonzero(~self.ever_observed)),
        )


def _run(records, kernel, prior, theta0, options, seed, mode, f_true) -> RunTrace:
    engine = _Engine(kernel, prior, theta0, options, seed, mode, f_true)
    for rec in records:
        engine.step(rec)
    return engine.finish()


def run_boem(records, kernel: TransitionKernel, prior: PerturbationPrior, theta0: Theta,
             options: RunnerOptions, seed, f_true: np.ndarray | None = None) -> RunTrace:
    """Run the stabilized block online EM on a fully visible stream.

    Set options.stabilize_every = 0 for the unstabilized variant. Returns the
    per-step / per-block trace; pass the true maps `f_true` to record map
    errors at block ends.
    """
    return _run(records, kernel, prior, theta0, options, seed, "shared", f_true)


def run_boem_partial(records, kernel: TransitionKernel, prior: PerturbationPrior, theta0: Theta,
                     options: RunnerOptions, seed, f_true: np.ndarray | None = None) -> RunTrace:
    """Per-AP variant for partially observed streams.

    Each AP advances through its own block schedule as it is observed and its
    map parameters update only when its own block completes. By default the
    noise variance is treated as known (theta0's value); pass
    options.estimate_sigma2=True to update it from completing APs.
    """
    return _run(records, kernel, prior, theta0, options, seed, "per_ap", f_true)


@dataclass
class FrozenTrace:
    cells: np.ndarray
    truth: np.ndarray
    distances: np.ndarray
    quantile: float
    block_quantiles: list[float]
    ess: np.ndarray


def evaluate_frozen(records, kernel: TransitionKernel, theta: Theta, n_particles: int,
                    seed, schedule: BlockSchedule | None = None, q: float = 0.8,
                    resampling: str = "multinomial") -> FrozenTrace:
    """Localization-error trace of a single particle system under a fixed theta.

    No statistics and no parameter updates; every record must carry ground
    truth. Per-block quantiles follow `schedule` when given.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    grid = theta.grid
    system = init_particle_system(n_particles, grid.n_cells, rng)
    cells = []
    truth = []
    ess = []
    for rec in records:
        if rec.truth is None:
            raise ParameterError("frozen evaluation requires ground truth on every record")
        system = bootstrap_filter_recursion(system, kernel, rec.y, theta, rec.mask, resampling)
        cells.append(map_position_estimate(system))
        truth.append(rec.truth)
        ess.append(system.ess())
    cells = np.asarray(cells, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    dist = np.linalg.norm(grid.cells[cells] - truth, axis=1)
    block_q = []
    if schedule is not None and len(dist):
        start, k = 0, 1
        while start + schedule.tau(k) <= len(dist):
            stop = start + schedule.tau(k)
            block_q.append(localization_quantile(dist[start:stop], q))
            start, k = stop, k + 1
    return FrozenTrace(cells=cells, truth=truth, distances=dist,
                       quantile=localization_quantile(dist, q) if len(dist) else float("nan"),
                       block_quantiles=block_q, ess=np.asarray(ess))
