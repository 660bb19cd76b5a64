"""YAML experiment configuration.

One file describes the whole pipeline in nested sections:

    grid:        width, height, ap_positions ([[x, y], ...])
    model:       a (transition spread), v1, v2 (prior kernel), jitter_scale
    truth:       c1, c2 (scalar or per-AP), sigma2 of the generating maps
    simulation:  length, visibility {kind: full|bernoulli|range, p, radius}
    run:         n_particles, stabilize_every, schedule {slope, intercept},
                 theta0 {c1, c2, sigma2}, estimate_sigma2 (null = mode
                 default), resampling, penalty_n_plus_one
    experiment:  replications, blocks, workers, base_seed, meters_per_cell

Unknown keys are rejected so typos fail loudly. `sec5a_config()` returns the
simulated-study setup (31x31 grid, 17 APs on a lattice plus center, tau_k =
10k + 500, stabilization every 5 blocks).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .boem import BlockSchedule, RunnerOptions
from .grid import GridMap, ParameterError, TransitionKernel, build_transition
from .observations import make_visibility
from .propagation import PerturbationPrior, Theta


@dataclass
class VisibilityConfig:
    kind: str = "full"
    p: float | list | None = None
    radius: float | None = None


@dataclass
class GridConfig:
    width: int = 31
    height: int = 31
    ap_positions: list = field(default_factory=list)


@dataclass
class ModelConfig:
    a: float = 6.0
    v1: float = 10.0
    v2: float = 18.0
    jitter_scale: float = 1e-6


@dataclass
class TruthConfig:
    c1: float | list = -26.0
    c2: float | list = -17.5
    sigma2: float = 25.0


@dataclass
class SimulationConfig:
    length: int = 10_000
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)


@dataclass
class Theta0Config:
    c1: float | list = -10.0
    c2: float | list = -30.0
    sigma2: float = 30.0


@dataclass
class RunConfig:
    n_particles: int = 25
    stabilize_every: int = 5
    schedule_slope: float = 10.0
    schedule_intercept: float = 500.0
    theta0: Theta0Config = field(default_factory=Theta0Config)
    estimate_sigma2: bool | None = None
    resampling: str = "multinomial"
    penalty_n_plus_one: bool = False


@dataclass
class ExperimentConfig:
    replications: int = 10
    blocks: int = 100
    workers: int = 2
    base_seed: int = 20260811
    meters_per_cell: float = 1.0


@dataclass
class Config:
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    # builders -----------------------------------------------------------
    def build_grid(self) -> GridMap:
        if not self.grid.ap_positions:
            raise ParameterError("config.grid.ap_positions must list at least one AP")
        return GridMap.regular(self.grid.width, self.grid.height, self.grid.ap_positions)

    def build_kernel(self, grid: GridMap) -> TransitionKernel:
        return build_transition(grid, self.model.a)

    def build_prior(self, grid: GridMap) -> PerturbationPrior:
        return PerturbationPrior(grid, self.model.v1, self.model.v2, self.model.jitter_scale)

    def build_theta0(self, grid: GridMap) -> Theta:
        t0 = self.run.theta0
        return Theta(grid, t0.c1, t0.c2, np.zeros((grid.n_aps, grid.n_cells)), t0.sigma2)

    def visibility(self):
        v = self.simulation.visibility
        if v.kind == "full":
            return None
        return make_visibility(v.kind, p=v.p, radius=v.radius)

    def schedule(self) -> BlockSchedule:
        return BlockSchedule(self.run.schedule_slope, self.run.schedule_intercept)

    def runner_options(self, stabilize: bool | None = None) -> RunnerOptions:
        n_b = self.run.stabilize_every
        if stabilize is not None:
            n_b = self.run.stabilize_every if stabilize else 0
        return RunnerOptions(
            n_particles=self.run.n_particles,
            stabilize_every=n_b,
            schedule=self.schedule(),
            estimate_sigma2=self.run.estimate_sigma2,
            resampling=self.run.resampling,
            penalty_n_plus_one=self.run.penalty_n_plus_one,
        )

    def stream_length(self, blocks: int | None = None) -> int:
        return self.schedule().total(blocks if blocks is not None else self.experiment.blocks)

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["run"]["schedule"] = {"slope": d["run"].pop("schedule_slope"),
                                "intercept": d["run"].pop("schedule_intercept")}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        data = dict(data or {})

        def section(name, klass, **sub):
            raw = dict(data.pop(name, {}) or {})
            for key, subklass in sub.items():
                if key in raw and raw[key] is not None:
                    raw[key] = subklass(**raw[key])
            known = set(klass.__dataclass_fields__)
            extra = set(raw) - known
            if extra:
                raise ParameterError(f"unknown keys in config section '{name}': {sorted(extra)}")
            return klass(**raw)

        run_raw = dict(data.get("run", {}) or {})
        if "schedule" in run_raw:
            sched = run_raw.pop("schedule") or {}
            run_raw["schedule_slope"] = sched.get("slope", 10.0)
            run_raw["schedule_intercept"] = sched.get("intercept", 500.0)
            data["run"] = run_raw

        cfg = cls(
            grid=section("grid", GridConfig),
            model=section("model", ModelConfig),
            truth=section("truth", TruthConfig),
            simulation=section("simulation", SimulationConfig, visibility=VisibilityConfig),
            run=section("run", RunConfig, theta0=Theta0Config),
            experiment=section("experiment", ExperimentConfig),
        )
        if data:
            raise ParameterError(f"unknown top-level config sections: {sorted(data)}")
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def sec5a_ap_positions() -> list:
    """17 APs: a 4x4 lattice over the 31x31 grid plus the center point."""
    coords = (3.5, 11.5, 19.5, 27.5)
    aps = [[x, y] for x in coords for y in coords]
    aps.append([15.5, 15.5])
    return aps


def sec5a_config() -> Config:
    """The simulated-study configuration (B = 17 on a 31x31 grid)."""
    cfg = Config()
    cfg.grid = GridConfig(width=31, height=31, ap_positions=sec5a_ap_positions())
    cfg.model = ModelConfig(a=6.0, v1=10.0, v2=18.0)
    cfg.truth = TruthConfig(c1=-26.0, c2=-17.5, sigma2=25.0)
    cfg.run = RunConfig(n_particles=25, stabilize_every=5,
                        schedule_slope=10.0, schedule_intercept=500.0,
                        theta0=Theta0Config(c1=-10.0, c2=-30.0, sigma2=30.0))
    cfg.experiment = ExperimentConfig(replications=10, blocks=100, workers=2)
    cfg.simulation = SimulationConfig(length=cfg.stream_length(100))
    return cfg


def small_config() -> Config:
    """Desk-scale smoke configuration (5x5 grid, 2 APs, short blocks)."""
    cfg = Config()
    cfg.grid = GridConfig(width=5, height=5, ap_positions=[[0.5, 0.5], [3.5, 2.5]])
    cfg.model = ModelConfig(a=3.0, v1=4.0, v2=8.0)
    cfg.truth = TruthConfig(c1=-26.0, c2=-17.5, sigma2=9.0)
    cfg.run = RunConfig(n_particles=20, stabilize_every=2,
                        schedule_slope=5.0, schedule_intercept=40.0,
                        theta0=Theta0Config(c1=-20.0, c2=-20.0, sigma2=12.0))
    cfg.experiment = ExperimentConfig(replications=2, blocks=4, workers=1)
    cfg.simulation = SimulationConfig(length=cfg.stream_length(4))
    return cfg
