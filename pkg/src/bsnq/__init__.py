"""Pseudospectral implicit-Euler solver and convergence laboratory for the
stochastic 2D Boussinesq equations on the periodic torus."""

from .spectral import (
    Operator,
    SpectralScalarField,
    SpectralVectorField,
    TorusGrid,
    apply_fractional_power,
    inner_product,
    leray_project,
    resolvent,
    sobolev_norm,
    to_physical,
    to_spectral,
)
from .nonlinear import advect_scalar, advect_vector, dealias, pairing_scalar, trilinear_b
from .noise import (
    CovarianceSpec,
    DiffusionSpec,
    WienerPath,
    aggregate_increments,
    apply_diffusion,
    diffusion_preset,
    sample_path,
    verify_growth_lipschitz,
)
from .scheme import (
    PicardDiverged,
    SchemeConfig,
    SchemeState,
    TrajectoryStats,
    energy_residual,
    run_trajectory,
    step,
)
from .analysis import (
    ErrorReport,
    LocalizationConfig,
    RateConstants,
    RateFit,
    compute_errors,
    estimate_increment_exponent,
    estimate_probability_rate,
    estimate_strong_rate,
    log_rate_projection,
    moment_table,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    parse_config,
    run_converge,
    run_increments,
    run_moments,
    run_selftest,
    run_simulate,
    serialize_config,
)

__version__ = "0.1.0"
