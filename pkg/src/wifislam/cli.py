"""Command-line interface.

Subcommands:
    simulate         draw ground-truth maps + trajectory, write the
                     observation log and the true maps
    run              run the block-online-EM runner over an observation log
    evaluate         localization-error trace of a frozen map estimate
    reproduce-sec5a  the full simulated study (multi-seed, stabilized vs
                     unstabilized vs optimal baseline)

Every output is a comma-separated file with a header row; reruns with the
same configuration and seeds are byte-identical (except meta.csv, which
records wall-clock timing).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .boem import evaluate_frozen, run_boem, run_boem_partial
from .config import Config, sec5a_config, small_config
from .evaluation import (
    read_maps_csv,
    run_experiment,
    write_blocks_csv,
    write_maps_csv,
    write_positions_csv,
    write_theta_csv,
    _write_csv,
)
from .grid import ParameterError
from .observations import LogFormatError, read_observation_log, write_observation_log
from .propagation import Theta
from .simulate import simulate_dataset


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        return Config.load(args.config)
    if getattr(args, "preset", None) == "small":
        return small_config()
    return sec5a_config()


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    grid = cfg.build_grid()
    kernel = cfg.build_kernel(grid)
    prior = cfg.build_prior(grid)
    length = args.length if args.length else cfg.simulation.length
    seed = args.seed if args.seed is not None else cfg.experiment.base_seed
    theta_star, truth, records = simulate_dataset(
        grid, kernel, prior, cfg.truth.c1, cfg.truth.c2, cfg.truth.sigma2,
        length, seed=np.random.default_rng(seed), visibility=cfg.visibility())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_observation_log(out / "observations.csv", records)
    mu = theta_star.F - theta_star.delta
    write_maps_csv(grid, theta_star.F, out / "maps_true.csv", mu=mu, delta=theta_star.delta)
    write_theta_csv(theta_star, out / "theta_true.csv")
    print(f"wrote {length} observations, true maps and coefficients to {out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    grid = cfg.build_grid()
    kernel = cfg.build_kernel(grid)
    prior = cfg.build_prior(grid)
    theta0 = cfg.build_theta0(grid)
    records = read_observation_log(args.log)
    f_true = read_maps_csv(args.true_maps, grid) if args.true_maps else None
    seed = args.seed if args.seed is not None else cfg.experiment.base_seed
    opts = cfg.runner_options(stabilize=args.mode != "unstabilized")
    runner = run_boem_partial if args.mode == "partial" else run_boem
    trace = runner(records, kernel, prior, theta0, opts,
                   seed=np.random.default_rng(seed), f_true=f_true)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.positions:
        write_positions_csv(trace, out / "positions.csv", cfg.experiment.meters_per_cell)
    write_blocks_csv(trace, out / "blocks.csv")
    write_maps_csv(grid, trace.theta_hat.F, out / "maps_hat.csv")
    write_maps_csv(grid, trace.theta_tilde.F, out / "maps_tilde.csv")
    write_theta_csv(trace.theta_hat, out / "theta_hat.csv")
    write_theta_csv(trace.theta_tilde, out / "theta_tilde.csv")
    if trace.never_observed_aps:
        print(f"warning: APs never observed: {list(trace.never_observed_aps)}", file=sys.stderr)
    print(f"{len(trace.blocks)} block updates over {trace.n_steps} steps; "
          f"sigma2_tilde={trace.theta_tilde.sigma2:.4g}; outputs in {out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    grid = cfg.build_grid()
    kernel = cfg.build_kernel(grid)
    records = read_observation_log(args.log)
    f = read_maps_csv(args.maps, grid)
    sigma2 = args.sigma2 if args.sigma2 is not None else cfg.truth.sigma2
    theta = Theta.from_maps(grid, f, sigma2)
    seed = args.seed if args.seed is not None else cfg.experiment.base_seed
    n_particles = args.particles if args.particles else cfg.run.n_particles
    trace = evaluate_frozen(records, kernel, theta, n_particles,
                            seed=np.random.default_rng(seed),
                            schedule=cfg.schedule(), q=args.quantile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scale = cfg.experiment.meters_per_cell
    _write_csv(out / "evaluate.csv",
               ["step", "truth_x", "truth_y", "x_est", "y_est", "dist"],
               [[i, int(trace.truth[i, 0]), int(trace.truth[i, 1]),
                 grid.cells[trace.cells[i], 0], grid.cells[trace.cells[i], 1],
                 trace.distances[i] * scale] for i in range(len(trace.cells))])
    _write_csv(out / "block_quantiles.csv", ["block", "loc_quantile"],
               [[k + 1, v * scale] for k, v in enumerate(trace.block_quantiles)])
    print(f"{args.quantile}-quantile of localization error: {trace.quantile * scale:.6g}")
    return 0


def _cmd_reproduce(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.experiment.base_seed = args.seed
    if args.full:
        cfg.experiment.replications = 50
    if args.replications:
        cfg.experiment.replications = args.replications
    if args.workers:
        cfg.experiment.workers = args.workers
    blocks = args.blocks if args.blocks else cfg.experiment.blocks
    modes = tuple(args.modes.split(","))
    reports = run_experiment(cfg, args.out, modes=modes, blocks=blocks)

    summary = []
    for mode in modes:
        med_first = np.median([r.modes[mode].map_err_tilde[min(9, len(r.modes[mode].blocks) - 1)]
                               for r in reports])
        med_last = np.median([r.modes[mode].map_err_tilde[-1] for r in reports])
        summary.append(f"{mode}: averaged map error median block10={med_first:.4g} "
                       f"last={med_last:.4g}")
    med_opt = np.median([r.optimal_q[-1] for r in reports if len(r.optimal_q)])
    med_loc = np.median([r.modes[modes[0]].loc_q_tilde[-1] for r in reports])
    summary.append(f"optimal baseline q80 at last block (median): {med_opt:.4g}; "
                   f"{modes[0]} averaged q80: {med_loc:.4g}")
    print("\n".join(summary))
    print(f"report files in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wifislam",
        description="Online WiFi propagation-map learning and grid localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate ground truth and an observation log")
    p.add_argument("--config", help="YAML config (default: built-in simulated-study setup)")
    p.add_argument("--preset", choices=["sec5a", "small"], default="sec5a")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run block online EM over an observation log")
    p.add_argument("--config", help="YAML config")
    p.add_argument("--preset", choices=["sec5a", "small"], default="sec5a")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["stabilized", "unstabilized", "partial"],
                   default="stabilized")
    p.add_argument("--seed", type=int)
    p.add_argument("--true-maps", help="maps_true.csv for per-block map errors")
    p.add_argument("--no-positions", dest="positions", action="store_false",
                   help="skip the per-step positions file")
    p.set_defaults(func=_cmd_run, positions=True)

    p = sub.add_parser("evaluate", help="frozen-map localization evaluation")
    p.add_argument("--config", help="YAML config")
    p.add_argument("--preset", choices=["sec5a", "small"], default="sec5a")
    p.add_argument("--log", required=True)
    p.add_argument("--maps", required=True, help="map file from simulate or run")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--quantile", type=float, default=0.8)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("reproduce-sec5a", help="full simulated study with report files")
    p.add_argument("--config", help="YAML config override")
    p.add_argument("--out", required=True)
    p.add_argument("--replications", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--modes", default="stabilized,unstabilized")
    p.add_argument("--full", action="store_true", help="use 50 replications")
    p.set_defaults(func=_cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, LogFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
