"""Schedule deviation: measuring how far a conditional diffusion flow strays
from the probability path of its own generated distribution."""

from .flows import AnalyticIMCF, EmpiricalIMCF, GaussianMixtureModel, MixtureFlow, SampleSet
from .interpolants import GuidanceKernel, KernelGuidedFlow, SplineGuidedFlow, solve_spline_weights
from .samplers import ReverseSampler, SamplerConfig, reverse_sample
from .schedules import LogLinearVE, time_grid
from .sd_metric import SDConfig, ScheduleDeviation, total_schedule_deviation
from .tinyflow import TinyFlowRegressor
from .transport import emd_exact, wasserstein1_1d

__version__ = "0.1.0"

__all__ = [
    "AnalyticIMCF",
    "EmpiricalIMCF",
    "GaussianMixtureModel",
    "GuidanceKernel",
    "KernelGuidedFlow",
    "LogLinearVE",
    "MixtureFlow",
    "ReverseSampler",
    "SDConfig",
    "SampleSet",
    "ScheduleDeviation",
    "SamplerConfig",
    "SplineGuidedFlow",
    "TinyFlowRegressor",
    "emd_exact",
    "reverse_sample",
    "solve_spline_weights",
    "time_grid",
    "total_schedule_deviation",
    "wasserstein1_1d",
]
