"""Online WiFi propagation-map learning and grid localization.

A mobile device moving on a finite grid observes RSSI vectors from fixed
access points. The package jointly estimates the per-AP propagation maps
(log-distance mean plus smooth Gaussian perturbation field) and the device
position, processing the observation stream in growing blocks with a
penalized online EM update and dual bootstrap particle filters.
"""

from .grid import GridMap, TransitionKernel, build_transition, SingularGeometryError, ParameterError
from .propagation import (
    PerturbationPrior,
    Theta,
    emission_logdensity,
    emission_logdensity_cells,
    friis_mean,
    sample_perturbation,
)
from .observations import LogFormatError, ObservationRecord, make_visibility, read_observation_log, write_observation_log
from .simulate import simulate_dataset, simulate_observations, simulate_trajectory
from .stats import StatLayout, SufficientStats
from .filtering import (
    ExactFilter,
    FilterUnderflowError,
    ParticleSystem,
    bootstrap_filter_recursion,
    exact_filter_init,
    exact_filter_step,
    init_particle_system,
    map_position_estimate,
    posterior_mean_position,
)
from .onlineem import ExactSmoother, advance_rho, finalize_block_statistic, rho_update_exact, rho_update_particle
from .mstep import MStepResult, m_step, penalized_Q
from .metrics import localization_quantile, map_error
from .boem import (
    BlockRecord,
    BlockSchedule,
    FrozenTrace,
    RunTrace,
    RunnerOptions,
    evaluate_frozen,
    run_boem,
    run_boem_partial,
)
from .config import Config, sec5a_config, small_config
from .evaluation import ExperimentReport, run_experiment, run_replication

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
