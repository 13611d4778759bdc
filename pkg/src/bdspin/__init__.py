"""Bounded-window spatial birth-and-death dynamics with coupled spin diffusions."""

from .birth_death import (
    BirthKernel,
    BoundViolationError,
    ConstantBirthKernel,
    EstablishmentBirthKernel,
    Event,
    FecundityBirthKernel,
    GlauberBirthKernel,
    RadialPotential,
    Trajectory,
    evaluate_birth_rate,
    gaussian_potential,
    replay_events,
    sample_driving_process,
    simulate,
    step_potential,
    verify_domination,
)
from .geometry import (
    Box,
    Configuration,
    Point,
    TemperedWeight,
    Window,
    log_bound_constant,
    poisson_configuration,
    tempered_pairing,
    weighted_tail_sum,
)
from .marked_process import (
    MarkedConfiguration,
    MarkedTrajectory,
    Observable,
    cadlag_check,
    combine,
    counting_observable,
    mark_sum_observable,
    observable_value,
)
from .scales import (
    OvsjannikovMatrix,
    ScaleParams,
    check_gronwall_inequality,
    check_moment_growth,
    check_operator_bound,
    gronwall_series_constant,
    ovsjannikov_bound_constant,
    weighted_lp_norm,
)
from .spin_sde import (
    CoefficientSet,
    InitialMarkPolicy,
    IntegratorConfig,
    MarkPath,
    assemble_diffusion,
    assemble_drift,
    check_drift_diffusion_bounds,
    cutoff_convergence_study,
    finite_volume_solve,
    integrate_marks,
    integrate_marks_ensemble,
    projection_consistency,
    strong_order_study,
)

__version__ = "0.1.0"
