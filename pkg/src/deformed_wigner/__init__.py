"""Deformed Wigner matrices ``W = R / sqrt(N) + S`` with a growing-rank signal.

Limit laws from the self-consistent equation for the Stieltjes transform,
outlier predictions through ``Phi(x) = x - sigma**2 g_nu0(x)``, and seeded
Monte Carlo experiments that check them.
"""
from .eigensolver import Spectrum, eigenvalues_symmetric, tridiagonal_eigenvalues, tridiagonalize
from .ensembles import (
    EnsembleSpec,
    RankRule,
    SymmetricMatrix,
    build_signal_matrix,
    derive_seed,
    sample_deformed,
    sample_goe,
)
from .estimators import OutlierMapper, SpectrumTransformer
from .experiments import (
    ExperimentPlan,
    ExperimentReport,
    estimate_mean_stieltjes,
    run_counting_experiment,
    run_mapping_experiment,
    run_rate_experiment,
)
from .measures import (
    DomainError,
    SpectralMeasure,
    atomic,
    grid_density,
    moment,
    point_mass,
    semicircle,
    signed_mass_on,
    stieltjes_eval,
    uniform,
)
from .outlier_theory import (
    OutlierPrediction,
    bbp_edge,
    bbp_largest,
    limit_law_cached,
    phi_eval,
    phi_prime,
    predict_outlier_measure,
    predict_outlier_positions,
    predicted_interval_mass,
    separation_threshold,
)
from .subordination import LimitLaw, SolverConfig, omega_eval, omega_prime, solve_g_mu0, solve_limit_law

__version__ = "0.1.0"
