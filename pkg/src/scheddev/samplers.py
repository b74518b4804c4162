"""Reverse-time generative samplers (DDPM, DDIM, GE) and forward noising.

All samplers integrate from ``s = 1`` down to ``s = 0`` on a uniform grid. By
default the schedule factor is integrated exactly over each step with the
noise prediction frozen (``discretization="sigma"``), which is the native
DDIM/DDPM update for VE schedules; ``"euler"`` takes plain steps in ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from .flows import ConditionalFlowField, Provenance, SampleSet
from .schedules import DiffusionSchedule

__all__ = [
    "SamplerDivergedError",
    "SamplerConfig",
    "Trajectory",
    "ReverseSampler",
    "reverse_sample",
    "forward_noise",
    "chain_noise",
]

ALGORITHMS = ("DDPM", "DDIM", "GE")


class SamplerDivergedError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite sampler state at step {step}")
        self.step = step


@dataclass
class SamplerConfig:
    algorithm: str = "DDIM"
    steps: int = 64
    ge_mu: float = 2.0
    noise_scale_fn: Callable | None = None
    rng_seed: int = 0
    discretization: str = "sigma"

    def __post_init__(self):
        self.algorithm = self.algorithm.upper()
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if int(self.steps) < 2:
            raise ValueError("steps must be >= 2")
        self.steps = int(self.steps)
        if not np.isfinite(self.ge_mu):
            raise ValueError("ge_mu must be finite")
        if self.discretization not in ("sigma", "euler"):
            raise ValueError("discretization must be 'sigma' or 'euler'")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list = field(default_factory=list)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def chain_noise(seed: int, count: int, steps: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(steps + 1, count, dim)``; chain ``i`` owns stream ``(seed, i)``.

    Row 0 seeds the initial state, rows ``1..steps`` feed the stochastic steps.
    """
    children = np.random.SeedSequence(seed).spawn(count)
    out = np.empty((steps + 1, count, dim))
    for i, child in enumerate(children):
        out[:, i, :] = np.random.default_rng(child).standard_normal((steps + 1, dim))
    return out


def _step_factor(schedule, s_hi, s_lo, mode):
    """Integral of ``sigma_dot`` over the step (``sigma`` mode) or its Euler estimate."""
    if mode == "sigma" and schedule.is_ve:
        return schedule.sigma(s_hi) - schedule.sigma(s_lo)
    return schedule.sigma_dot(s_hi) * (s_hi - s_lo)


def reverse_sample(
    flow: ConditionalFlowField,
    z,
    config: SamplerConfig,
    schedule: DiffusionSchedule,
    count: int,
    dim: int = 1,
    return_trajectory: bool = False,
):
    """Draw ``count`` samples at ``s = 0`` by integrating the reverse process from ``s = 1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    steps = config.steps
    times = np.linspace(1.0, 0.0, steps + 1)
    noise = chain_noise(config.rng_seed, count, steps, dim)
    x = schedule.sigma(1.0) * noise[0]
    algo = config.algorithm
    prev_eps = None
    traj = Trajectory(times, [x.copy()]) if return_trajectory else None

    for k in range(steps):
        s_hi, s_lo = times[k], times[k + 1]
        eps = flow.epsilon(x, z, s_hi)
        factor = _step_factor(schedule, s_hi, s_lo, config.discretization)
        if algo == "DDIM":
            x = x - factor * eps
        elif algo == "GE":
            filtered = eps if prev_eps is None else config.ge_mu * eps + (1.0 - config.ge_mu) * prev_eps
            prev_eps = eps
            x = x - factor * filtered
        else:
            x = _ddpm_step(x, eps, flow, z, schedule, s_hi, s_lo, factor, noise[k + 1], config)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergedError(k)
        if traj is not None:
            traj.states.append(x.copy())

    samples = SampleSet(x, condition=z, provenance=Provenance.SamplerOutput)
    if return_trajectory:
        return samples, traj
    return samples


def _ddpm_step(x, eps, flow, z, schedule, s_hi, s_lo, factor, xi, config):
    coef = schedule.coefficients(s_hi)
    if config.noise_scale_fn is not None:
        noise_scale = float(config.noise_scale_fn(s_hi))
        if noise_scale < 0:
            raise ValueError("noise scale must be non-negative")
        # general reverse drift: (eps_scale / gamma1 - 1) v + (gamma2 / gamma1) x
        v = schedule.sigma_dot(s_hi) * eps
        drift = (noise_scale / coef.gamma1 - 1.0) * v + (coef.gamma2 / coef.gamma1) * x
        ds = s_hi - s_lo
        return x + drift * ds + np.sqrt(2.0 * noise_scale * ds) * xi
    if config.discretization == "sigma" and schedule.is_ve:
        var = schedule.sigma(s_hi) ** 2 - schedule.sigma(s_lo) ** 2
        return x - 2.0 * factor * eps + np.sqrt(var) * xi
    ds = s_hi - s_lo
    noise_scale = -coef.gamma1
    drift = -2.0 * schedule.sigma_dot(s_hi) * eps + (coef.gamma2 / coef.gamma1) * x
    return x + drift * ds + np.sqrt(2.0 * noise_scale * ds) * xi


def forward_noise(samples: SampleSet, s: float, schedule: DiffusionSchedule, rng: np.random.Generator) -> SampleSet:
    """``x0 + sigma(s) * noise`` with fresh standard-normal draws."""
    if not schedule.is_ve:
        raise ValueError("forward_noise expects a VE schedule")
    pts = samples.points
    noised = pts + schedule.sigma(s) * rng.standard_normal(pts.shape)
    return SampleSet(noised, samples.condition, samples.provenance)


class ReverseSampler(BaseEstimator):
    """Estimator-style wrapper: hyperparameters via ``get_params``, draws via ``sample``."""

    def __init__(self, algorithm="DDIM", steps=64, ge_mu=2.0, random_state=0, discretization="sigma"):
        self.algorithm = algorithm
        self.steps = steps
        self.ge_mu = ge_mu
        self.random_state = random_state
        self.discretization = discretization

    def config(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(
            algorithm=self.algorithm,
            steps=self.steps,
            ge_mu=self.ge_mu,
            rng_seed=self.random_state if seed is None else seed,
            discretization=self.discretization,
        )

    def sample(self, flow, z, count, dim=1, seed=None) -> SampleSet:
        return reverse_sample(flow, z, self.config(seed), flow.schedule, count, dim)
