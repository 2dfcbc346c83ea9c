"""Certificate-based receding-horizon isolation control for networked SIQR epidemics."""

from .certify import (
    DecayCertificate,
    TerminalConfig,
    build_continuation,
    certify_decay,
    check_terminal_invariance,
    in_terminal_set,
    simulate_continuation,
)
from .control import MpcConfig, MpcSolution, SolverConfig, solve_mpc, solve_myopic, stage_cost, total_cost, warm_start
from .errors import (
    CalibrationError,
    ColdStartInfeasibleError,
    ConfigError,
    ContractError,
    InfeasibleError,
    IrreducibilityError,
    NumericalFailure,
    SpectralConvergenceError,
    StepSizeError,
)
from .integrator import StepConfig, psi_step, rollout
from .netmodel import (
    ControlVector,
    EpiParams,
    EpiState,
    ForecastProfile,
    NetworkModel,
    TransmissionRate,
    infection_force,
    validate_model,
    vector_field,
)
from .scenario import RunRecord, Scenario, calibrate, compare, run_closed_loop, synth_network
from .spectral import build_infected_matrix, matrix_leq, perron_left_vector, spectral_abscissa

__version__ = "0.1.0"
