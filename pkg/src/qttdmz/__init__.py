"""Tensor-train solver for the robust Zakai filtering equation, with baselines."""
from .errors import (
    ConfigError,
    DegenerateStateError,
    DivergenceError,
    DomainError,
    NumericalError,
    QttDmzError,
    RankOverflowError,
    ResourceError,
    StabilityError,
)
from .tt import (
    TruncationPolicy,
    TtOperator,
    TtVector,
    tt_add,
    tt_apply,
    tt_apply_round,
    tt_compose,
    tt_dot,
    tt_from_dense,
    tt_hadamard,
    tt_kron,
    tt_norm,
    tt_round,
    tt_to_dense,
)
from .qtt import qtt_fold, qtt_unfold, qtt_from_dense, qtt_to_dense
from .polyadic import Grid, PolyadicFunction, Term, term
from .operators import (
    SolverParams,
    StabilityReport,
    assemble_generator,
    build_convection,
    build_laplacian,
    build_potential,
    build_propagator,
    check_stability,
)
from .dmz import DensityState, DmzFilter, assimilate, build_update_factor, estimate_moments, export_marginal, init_density, predict, rescale
from .models import NlfModel, Trajectory, cubic_sensor_preset, multimode_preset, simulate
from .baselines import GaussianBelief, ParticleEnsemble, ekf_step, jacobian, pf_step

__version__ = "0.1.0"
