"""Particle-in-cell Vlasov-Poisson simulation with structure-preserving
low-rank and adaptive hyper-reduced models."""

__version__ = "0.1.0"

from .fem import FemGrid, charge_density, solve_poisson, field_gradient, hamiltonian
from .fom import BenchmarkSpec, EnsembleState, hammersley, sample_initial, sv_step, run_fom
from .dlr import ReducedState, cotangent_lift, retract, apply_inverse_tangent_map, prk2_step
from .hyper import (
    HamiltonianDecomposition,
    EimApprox,
    build_eim,
    greedy_eim,
    hyper_reduced_gradient,
    subsample_parameters,
    prk_hr_step,
    compute_bound_constants,
)
from .adapt import jacobian_E_matvec, rank_update, build_interpolation_operator
from .driver import RunConfig, MetricSeries, run, metrics, scaling_probe, preset

__all__ = [
    "FemGrid", "charge_density", "solve_poisson", "field_gradient", "hamiltonian",
    "BenchmarkSpec", "EnsembleState", "hammersley", "sample_initial", "sv_step",
    "run_fom", "ReducedState", "cotangent_lift", "retract",
    "apply_inverse_tangent_map", "prk2_step", "HamiltonianDecomposition",
    "EimApprox", "build_eim", "greedy_eim", "hyper_reduced_gradient",
    "subsample_parameters", "prk_hr_step", "compute_bound_constants",
    "jacobian_E_matvec", "rank_update", "build_interpolation_operator",
    "RunConfig", "MetricSeries", "run", "metrics", "scaling_probe", "preset",
]
