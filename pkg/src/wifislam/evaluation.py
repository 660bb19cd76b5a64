"""Experiment driver and report files for the simulated study.

Each replication simulates fresh ground truth (maps, trajectory, noise),
runs the requested runner modes on the same stream with the same runner
seed (so stabilized and unstabilized arms are seed-paired), runs the
optimal-filter baseline with the true maps, and reduces everything to
per-block rows. Replications are independent and may run in a process
pool; outputs are keyed by replication index so results do not depend on
worker count. All files are comma-separated with headers and 17-digit
floats, so a rerun with the same configuration is byte-identical.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boem import RunTrace, evaluate_frozen, run_boem, run_boem_partial
from .config import Config
from .grid import ParameterError
from .metrics import localization_quantile, map_error  # re-exported API
from .observations import read_observation_log
from .propagation import Theta
from .simulate import simulate_dataset

__all__ = [
    "ExperimentReport", "ModeResult", "map_error", "localization_quantile",
    "run_experiment", "run_replication", "write_experiment_files",
    "write_positions_csv", "write_blocks_csv", "write_maps_csv", "read_maps_csv",
    "write_theta_csv",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


@dataclass
class ModeResult:
    """Per-block summaries of one runner mode within one replication."""

    mode: str
    blocks: np.ndarray
    tau: np.ndarray
    total_obs: np.ndarray
    map_err_hat: np.ndarray
    map_err_tilde: np.ndarray
    loc_q_hat: np.ndarray
    loc_q_tilde: np.ndarray
    sigma2_hat: np.ndarray
    sigma2_tilde: np.ndarray
    stabilized: np.ndarray
    partial: np.ndarray


@dataclass
class ExperimentReport:
    """One replication: per-mode block summaries plus the optimal baseline."""

    replication: int
    seed_key: tuple
    wall_clock: float
    modes: dict[str, ModeResult]
    optimal_q: np.ndarray

    def validate(self) -> None:
        for m in self.modes.values():
            if np.any(m.map_err_tilde < 0) or np.any(m.loc_q_tilde < 0):
                raise ValueError("errors must be nonnegative")


def _mode_result(mode: str, trace: RunTrace) -> ModeResult:
    evs = trace.blocks
    return ModeResult(
        mode=mode,
        blocks=np.array([ev.block_index for ev in evs]),
        tau=np.array([float(ev.n[0]) for ev in evs]),
        total_obs=np.array([float(ev.total_obs[0]) for ev in evs]),
        map_err_hat=np.array([np.nan if ev.map_err_hat is None else ev.map_err_hat for ev in evs]),
        map_err_tilde=np.array([np.nan if ev.map_err_tilde is None else ev.map_err_tilde for ev in evs]),
        loc_q_hat=np.array([np.nan if ev.loc_q_hat is None else ev.loc_q_hat for ev in evs]),
        loc_q_tilde=np.array([np.nan if ev.loc_q_tilde is None else ev.loc_q_tilde for ev in evs]),
        sigma2_hat=np.array([ev.sigma2_hat for ev in evs]),
        sigma2_tilde=np.array([ev.sigma2_tilde for ev in evs]),
        stabilized=np.array([ev.stabilized for ev in evs]),
        partial=np.array([ev.partial for ev in evs]),
    )


def run_replication(config_dict: dict, replication: int, modes: tuple[str, ...],
                    blocks: int | None = None) -> ExperimentReport:
    """Simulate one dataset and run every requested mode plus the baseline.

    Modes: "stabilized", "unstabilized" (shared schedule), "partial" (per-AP,
    Bernoulli masks only if the config says so). The runner seed is shared
    across modes so arms are paired.
    """
    cfg = Config.from_dict(config_dict)
    t_start = time.perf_counter()
    grid = cfg.build_grid()
    kernel = cfg.build_kernel(grid)
    prior = cfg.build_prior(grid)
    theta0 = cfg.build_theta0(grid)
    n_blocks = blocks if blocks is not None else cfg.experiment.blocks
    length = cfg.schedule().total(n_blocks)

    seed_key = (cfg.experiment.base_seed, replication)
    ss = np.random.SeedSequence(seed_key)
    sim_seed, run_seed, baseline_seed = ss.spawn(3)

    theta_star, truth, records = simulate_dataset(
        grid, kernel, prior, cfg.truth.c1, cfg.truth.c2, cfg.truth.sigma2,
        length, seed=np.random.default_rng(sim_seed), visibility=cfg.visibility())

    results: dict[str, ModeResult] = {}
    for mode in modes:
        if mode == "stabilized":
            opts = cfg.runner_options(stabilize=True)
            trace = run_boem(records, kernel, prior, theta0, opts,
                             seed=np.random.default_rng(run_seed), f_true=theta_star.F)
        elif mode == "unstabilized":
            opts = cfg.runner_options(stabilize=False)
            trace = run_boem(records, kernel, prior, theta0, opts,
                             seed=np.random.default_rng(run_seed), f_true=theta_star.F)
        elif mode == "partial":
            opts = cfg.runner_options(stabilize=True)
            trace = run_boem_partial(records, kernel, prior, theta0, opts,
                                     seed=np.random.default_rng(run_seed), f_true=theta_star.F)
        else:
            raise ParameterError(f"unknown experiment mode {mode!r}")
        results[mode] = _mode_result(mode, trace)

    baseline = evaluate_frozen(records, kernel, theta_star, cfg.run.n_particles,
                               seed=np.random.default_rng(baseline_seed),
                               schedule=cfg.schedule())
    report = ExperimentReport(
        replication=replication,
        seed_key=seed_key,
        wall_clock=time.perf_counter() - t_start,
        modes=results,
        optimal_q=np.asarray(baseline.block_quantiles),
    )
    report.validate()
    return report


def run_experiment(cfg: Config, out_dir, modes: tuple[str, ...] = ("stabilized", "unstabilized"),
                   replications: int | None = None, blocks: int | None = None,
                   workers: int | None = None) -> list[ExperimentReport]:
    """Run all replications (in parallel when workers > 1) and write reports."""
    reps = replications if replications is not None else cfg.experiment.replications
    n_workers = workers if workers is not None else cfg.experiment.workers
    if reps < 1 or (blocks is not None and blocks < 1) or cfg.experiment.blocks < 1:
        raise ParameterError("experiment needs at least one replication and one block")
    cfg.schedule().tau(1)  # validates the schedule before any work
    config_dict = cfg.to_dict()

    reports: list[ExperimentReport] = []
    if n_workers and n_workers > 1 and reps > 1:
        # single-threaded BLAS inside workers; inherited at process creation
        saved = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS")}
        os.environ["OMP_NUM_THREADS"] = "1"
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        try:
            with ProcessPoolExecutor(max_workers=min(n_workers, reps)) as pool:
                futures = [pool.submit(run_replication, config_dict, r, modes, blocks)
                           for r in range(reps)]
                reports = [f.result() for f in futures]
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        reports = [run_replication(config_dict, r, modes, blocks) for r in range(reps)]

    write_experiment_files(reports, out_dir, cfg, modes)
    return reports


def write_experiment_files(reports: list[ExperimentReport], out_dir, cfg: Config,
                           modes: tuple[str, ...]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")

    rows = []
    for rep in reports:
        for mode in modes:
            m = rep.modes[mode]
            for i in range(len(m.blocks)):
                rows.append([rep.replication, mode, m.blocks[i], m.tau[i], m.total_obs[i],
                             m.map_err_hat[i], m.map_err_tilde[i], m.loc_q_hat[i],
                             m.loc_q_tilde[i], m.sigma2_hat[i], m.sigma2_tilde[i],
                             m.stabilized[i], m.partial[i]])
    _write_csv(out / "blocks.csv",
               ["replication", "mode", "block", "tau", "total_obs", "map_err_hat",
                "map_err_tilde", "loc_q80_hat", "loc_q80_tilde", "sigma2_hat",
                "sigma2_tilde", "stabilized", "partial"], rows)

    _write_csv(out / "optimal.csv", ["replication", "block", "loc_q80_optimal"],
               [[rep.replication, k + 1, q] for rep in reports
                for k, q in enumerate(rep.optimal_q)])

    _write_csv(out / "meta.csv", ["replication", "base_seed", "wall_clock_s"],
               [[rep.replication, rep.seed_key[0], rep.wall_clock] for rep in reports])

    # cross-replication aggregates, boxplot-ready
    agg_rows = []
    for mode in modes:
        n_blocks = min(len(rep.modes[mode].blocks) for rep in reports)
        for i in range(n_blocks):
            errs = np.array([rep.modes[mode].map_err_tilde[i] for rep in reports])
            locs = np.array([rep.modes[mode].loc_q_tilde[i] for rep in reports])
            opt = np.array([rep.optimal_q[i] if i < len(rep.optimal_q) else np.nan
                            for rep in reports])
            agg_rows.append([mode, reports[0].modes[mode].blocks[i],
                             np.median(errs), np.percentile(errs, 25), np.percentile(errs, 75),
                             np.median(locs), np.percentile(locs, 25), np.percentile(locs, 75),
                             np.median(opt), np.percentile(opt, 25), np.percentile(opt, 75)])
    _write_csv(out / "aggregate.csv",
               ["mode", "block", "map_err_tilde_median", "map_err_tilde_q25", "map_err_tilde_q75",
                "loc_q80_tilde_median", "loc_q80_tilde_q25", "loc_q80_tilde_q75",
                "loc_q80_optimal_median", "loc_q80_optimal_q25", "loc_q80_optimal_q75"], agg_rows)


# ---------------------------------------------------------------------------
# runner trace files (per-step positions, per-block snapshots, map dumps)

def write_positions_csv(trace: RunTrace, path, meters_per_cell: float = 1.0) -> None:
    coords_hat = trace.positions_hat()
    coords_tilde = trace.positions_tilde()
    rows = []
    for i in range(trace.n_steps):
        tx, ty = trace.truth[i]
        rows.append([i, trace.block_of_step[i],
                     "" if np.isnan(tx) else int(tx), "" if np.isnan(ty) else int(ty),
                     coords_hat[i, 0], coords_hat[i, 1], coords_tilde[i, 0], coords_tilde[i, 1],
                     trace.dist_hat[i] * meters_per_cell if not np.isnan(trace.dist_hat[i]) else None,
                     trace.dist_tilde[i] * meters_per_cell if not np.isnan(trace.dist_tilde[i]) else None,
                     trace.ess_hat[i], trace.ess_tilde[i]])
    _write_csv(path, ["step", "block", "truth_x", "truth_y", "x_hat", "y_hat",
                      "x_tilde", "y_tilde", "dist_hat", "dist_tilde", "ess_hat", "ess_tilde"],
               rows)


def write_blocks_csv(trace: RunTrace, path) -> None:
    rows = []
    for ev in trace.blocks:
        for idx, j in enumerate(ev.aps):
            rows.append([ev.step, ev.t, int(j), int(ev.k[idx]), ev.n[idx], ev.total_obs[idx],
                         ev.sigma2_hat, ev.sigma2_tilde,
                         ev.c1_hat[j], ev.c2_hat[j], ev.c1_tilde[j], ev.c2_tilde[j],
                         ev.map_err_hat, ev.map_err_tilde, ev.loc_q_hat, ev.loc_q_tilde,
                         ev.stabilized, ev.partial, int(j) in ev.frozen_aps, ev.sigma2_clamped])
    _write_csv(path, ["step", "t", "ap", "block", "n_obs", "total_obs", "sigma2_hat",
                      "sigma2_tilde", "c1_hat", "c2_hat", "c1_tilde", "c2_tilde",
                      "map_err_hat", "map_err_tilde", "loc_q80_hat", "loc_q80_tilde",
                      "stabilized", "partial", "frozen", "sigma2_clamped"], rows)


def write_maps_csv(grid, f_matrix: np.ndarray, path, mu: np.ndarray | None = None,
                   delta: np.ndarray | None = None) -> None:
    """One row per (AP, cell) dump of a map matrix, optionally split parts."""
    rows = []
    for j in range(f_matrix.shape[0]):
        for x in range(grid.n_cells):
            row = [j, x, int(grid.cells[x, 0]), int(grid.cells[x, 1])]
            if mu is not None and delta is not None:
                row += [mu[j, x], delta[j, x]]
            row.append(f_matrix[j, x])
            rows.append(row)
    header = ["ap", "cell", "x", "y"] + (["mu", "delta"] if mu is not None and delta is not None else []) + ["F"]
    _write_csv(path, header, rows)


def read_maps_csv(path, grid) -> np.ndarray:
    """Rebuild the (B, C) map matrix written by write_maps_csv."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    i_ap, i_cell, i_f = header.index("ap"), header.index("cell"), header.index("F")
    entries = [(int(p[i_ap]), int(p[i_cell]), float(p[i_f]))
               for p in (line.split(",") for line in lines[1:] if line.strip())]
    b = max(e[0] for e in entries) + 1
    f = np.full((b, grid.n_cells), np.nan)
    for j, x, v in entries:
        f[j, x] = v
    if np.isnan(f).any():
        raise ParameterError(f"map file {path} does not cover every (ap, cell) pair")
    return f


def write_theta_csv(theta: Theta, path) -> None:
    rows = [[j, theta.c1[j], theta.c2[j], theta.sigma2] for j in range(theta.n_aps)]
    _write_csv(path, ["ap", "c1", "c2", "sigma2"], rows)


def load_observations(path):
    return read_observation_log(path)
