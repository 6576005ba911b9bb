"""Spatial SIR particle systems, their mean-field and local limits, and convergence diagnostics."""
from ._backend import BACKEND, available_backends
from .engine import (
    Event,
    MartingaleDiagnostic,
    TestFunctionTriple,
    Trajectory,
    gillespie_step,
    martingale_path,
    simulate,
)
from .fields import GridField, NumericalError, field_from_initial, rk4_integrate
from .kernels import ConstantT, DotT, GaussianT, Local, MeanField, eval_tau
from .model import (
    CompartmentProfile,
    HealthState,
    InitialDistribution,
    ModelParams,
    PopulationState,
    TruncatedGaussian,
    Uniform,
    sample_initial_population,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "available_backends",
    "Event",
    "MartingaleDiagnostic",
    "TestFunctionTriple",
    "Trajectory",
    "gillespie_step",
    "martingale_path",
    "simulate",
    "GridField",
    "NumericalError",
    "field_from_initial",
    "rk4_integrate",
    "ConstantT",
    "DotT",
    "GaussianT",
    "Local",
    "MeanField",
    "eval_tau",
    "CompartmentProfile",
    "HealthState",
    "InitialDistribution",
    "ModelParams",
    "PopulationState",
    "TruncatedGaussian",
    "Uniform",
    "sample_initial_population",
]
