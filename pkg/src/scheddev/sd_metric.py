"""Schedule Deviation: the rate at which a flow leaves its own ideal denoising path.

For a flow with noise prediction ``eps`` and the ideal prediction ``eps_I`` of
the flow's own terminal distribution, the per-time integrand is::

    r(x) = | sigma(s) * div(eps - eps_I)(x) + (eps_I - eps)(x) . eps_I(x) |

averaged over ``x ~ p_s^IMCF``. The true deviation is ``c2(s) * E[r]``; the
default report fixes ``c2 = 1`` so values are comparable across noise ranges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .flows import (
    AnalyticIMCF,
    ConditionalFlowField,
    EmpiricalIMCF,
    GaussianMixtureModel,
    SampleSet,
    as_points,
)
from .samplers import SamplerConfig, reverse_sample
from .schedules import DiffusionSchedule, time_grid

__all__ = [
    "DivergenceStrategy",
    "StrategyError",
    "NonFiniteIntegrandError",
    "SDConfig",
    "SDReport",
    "divergence_of_difference",
    "sd_integrand",
    "schedule_deviation_at",
    "total_schedule_deviation",
    "sampler_oracle",
    "ScheduleDeviation",
    "DensityGrid",
    "InstabilityError",
    "TVBoundResult",
    "evolve_density_1d",
    "tv_bound_check_1d",
]

log = logging.getLogger(__name__)


class DivergenceStrategy(str, Enum):
    Analytic = "analytic"
    RandomBasis = "random"
    FiniteDifference = "fd"


class StrategyError(ValueError):
    pass


class NonFiniteIntegrandError(FloatingPointError):
    def __init__(self, points):
        super().__init__(f"non-finite schedule-deviation integrand at x_s = {points!r}")
        self.points = points


@dataclass
class SDConfig:
    n_outer: int = 256
    n_imcf: int = 2000
    divergence_strategy: DivergenceStrategy = DivergenceStrategy.Analytic
    fd_step: float = 1e-4
    s_grid: np.ndarray = field(default_factory=lambda: time_grid(16))
    report_c2_one: bool = True

    def __post_init__(self):
        self.divergence_strategy = DivergenceStrategy(self.divergence_strategy)
        self.s_grid = np.asarray(self.s_grid, dtype=float).ravel()
        if self.n_outer < 1 or self.n_imcf < 1:
            raise ValueError("n_outer and n_imcf must be >= 1")
        if self.s_grid.size == 0:
            raise ValueError("s_grid must be non-empty")
        if np.any(self.s_grid <= 0) or np.any(self.s_grid >= 1):
            raise ValueError("s_grid must lie strictly inside (0, 1)")
        if np.any(np.diff(self.s_grid) <= 0):
            raise ValueError("s_grid must be strictly increasing")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")

    def echo(self) -> dict:
        d = asdict(self)
        d["divergence_strategy"] = self.divergence_strategy.value
        d["s_grid"] = [float(v) for v in self.s_grid]
        return d


@dataclass
class SDReport:
    z: object
    s: np.ndarray
    sd: np.ndarray
    stderr: np.ndarray
    total_sd: float
    total_stderr: float
    config: dict
    unreliable: bool = False

    @property
    def per_s(self):
        return list(zip(self.s.tolist(), self.sd.tolist(), self.stderr.tolist()))

    def rows(self):
        zc = np.atleast_1d(np.asarray(self.z, dtype=float)).tolist()
        for s, v, e in self.per_s:
            yield [*zc, s, v, e, self.total_sd, self.config.get("divergence_strategy")]


class _ZeroOracle:
    degenerate = False

    def epsilon(self, x, s):
        return np.zeros_like(as_points(x))

    def epsilon_divergence(self, x, s):
        return np.zeros(as_points(x).shape[0])


def _central_component(fn, x, j, h):
    """``(fn(x + h e_j)_j - fn(x - h e_j)_j) / (2 h)`` row-wise, ``j`` and ``h`` per row."""
    n = x.shape[0]
    rows = np.arange(n)
    xp = x.copy()
    xm = x.copy()
    xp[rows, j] += h
    xm[rows, j] -= h
    return (fn(xp)[rows, j] - fn(xm)[rows, j]) / (2.0 * h)


def divergence_of_difference(
    flow: ConditionalFlowField,
    oracle,
    x,
    z,
    s: float,
    strategy=DivergenceStrategy.Analytic,
    rng: np.random.Generator | None = None,
    fd_step: float = 1e-4,
) -> np.ndarray:
    """``div(eps_flow - eps_oracle)`` at each row of ``x``.

    ``oracle=None`` means a zero reference, giving the plain divergence of the
    flow's noise prediction.
    """
    strategy = DivergenceStrategy(strategy)
    x = as_points(x)
    oracle = _ZeroOracle() if oracle is None else oracle
    n, d = x.shape
    if strategy is DivergenceStrategy.Analytic:
        if not flow.has_divergence:
            raise StrategyError(f"analytic divergence requested but {type(flow).__name__} has none")
        return flow.epsilon_divergence(x, z, s) - oracle.epsilon_divergence(x, s)

    def diff(pts):
        return flow.epsilon(pts, z, s) - oracle.epsilon(pts, s)

    if strategy is DivergenceStrategy.FiniteDifference:
        total = np.zeros(n)
        for j in range(d):
            h = fd_step * (1.0 + np.abs(x[:, j]))
            total += _central_component(diff, x, np.full(n, j), h)
        return total

    rng = np.random.default_rng() if rng is None else rng
    j = rng.integers(0, d, size=n)
    h = fd_step * (1.0 + np.abs(x[np.arange(n), j]))
    return d * _central_component(diff, x, j, h)


def sd_integrand(flow, oracle, z, s, x_s, config: SDConfig, schedule: DiffusionSchedule, rng=None):
    """Per-point integrand ``r`` (already multiplied by ``c2`` unless the c2 = 1 convention is on)."""
    x_s = as_points(x_s)
    sig = schedule.sigma(s)
    eps_f = flow.epsilon(x_s, z, s)
    eps_i = oracle.epsilon(x_s, s)
    div = divergence_of_difference(flow, oracle, x_s, z, s, config.divergence_strategy, rng, config.fd_step)
    r = np.abs(sig * div + np.einsum("nd,nd->n", eps_i - eps_f, eps_i))
    if not config.report_c2_one:
        r = r * schedule.coefficients(s).c2
    bad = ~np.isfinite(r)
    if np.any(bad):
        raise NonFiniteIntegrandError(x_s[bad])
    return r


def _probe_points(oracle, n, rng, probe_x0):
    if probe_x0 is not None:
        probe_x0 = as_points(probe_x0)
        if probe_x0.shape[0] < n:
            raise ValueError(f"need {n} probe points, got {probe_x0.shape[0]}")
        return probe_x0[:n]
    return oracle.sample_p0(n, rng)


def schedule_deviation_at(
    flow,
    oracle,
    z,
    s: float,
    config: SDConfig,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    probe_x0=None,
    return_integrand: bool = False,
):
    """Monte-Carlo estimate ``(mean, stderr)`` of the deviation at one time ``s``.

    ``oracle`` supplies the ideal noise prediction (``AnalyticIMCF`` for
    mixtures, ``EmpiricalIMCF`` for sampler output). Probe points are drawn
    from the oracle's ``p0`` unless ``probe_x0`` is given, then noised to ``s``.
    """
    x0 = _probe_points(oracle, config.n_outer, rng, probe_x0)
    x_s = x0 + schedule.sigma(s) * rng.standard_normal(x0.shape)
    r = sd_integrand(flow, oracle, z, s, x_s, config, schedule, rng)
    n = r.shape[0]
    stderr = float(r.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    if return_integrand:
        return float(r.mean()), stderr, r
    return float(r.mean()), stderr


def _trapezoid_weights(grid):
    if grid.size == 1:
        return np.ones(1)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def total_schedule_deviation(
    flow,
    oracle,
    z,
    config: SDConfig,
    schedule: DiffusionSchedule,
    seed: int = 0,
    probe_x0=None,
) -> SDReport:
    """Deviation over ``config.s_grid`` with the trapezoid-rule total.

    A grid of one point reports that point's value as the total.
    """
    rng = np.random.default_rng(seed)
    est = np.empty(config.s_grid.size)
    err = np.empty_like(est)
    for i, s in enumerate(config.s_grid):
        est[i], err[i] = schedule_deviation_at(flow, oracle, z, float(s), config, schedule, rng, probe_x0)
    w = _trapezoid_weights(config.s_grid)
    unreliable = bool(getattr(oracle, "degenerate", False))
    if unreliable:
        log.warning("IMCF oracle built from a single sample; deviation estimates are unreliable")
    return SDReport(
        z=z,
        s=config.s_grid.copy(),
        sd=est,
        stderr=err,
        total_sd=float(w @ est),
        total_stderr=float(np.sqrt(np.sum((w * err) ** 2))),
        config=config.echo(),
        unreliable=unreliable,
    )


def sampler_oracle(flow, z, sampler: SamplerConfig, schedule, n_imcf: int, n_probe: int, dim: int = 1):
    """Draw ``n_imcf + n_probe`` samples from the flow; return ``(EmpiricalIMCF, probe_x0)``.

    The two pools are disjoint so the probe points are independent of the oracle set.
    """
    out = reverse_sample(flow, z, sampler, schedule, n_imcf + n_probe, dim)
    pts = out.points
    oracle = EmpiricalIMCF(SampleSet(pts[:n_imcf], z, out.provenance), schedule)
    return oracle, pts[n_imcf:]


class ScheduleDeviation(BaseEstimator):
    """Estimator-style front end: ``fit(flow, z)`` stores ``report_``.

    With ``oracle="sampler"`` the flow's own samples (drawn with ``sampler``)
    define the ideal path; otherwise pass a ``GaussianMixtureModel`` for the
    analytic path.
    """

    def __init__(self, n_outer=256, n_imcf=2000, divergence="analytic", s_points=16,
                 fd_step=1e-4, report_c2_one=True, sampler="DDPM", sampler_steps=64,
                 random_state=0):
        self.n_outer = n_outer
        self.n_imcf = n_imcf
        self.divergence = divergence
        self.s_points = s_points
        self.fd_step = fd_step
        self.report_c2_one = report_c2_one
        self.sampler = sampler
        self.sampler_steps = sampler_steps
        self.random_state = random_state

    def sd_config(self) -> SDConfig:
        return SDConfig(self.n_outer, self.n_imcf, self.divergence, self.fd_step,
                        time_grid(self.s_points), self.report_c2_one)

    def fit(self, flow, z, oracle="sampler", dim=1):
        cfg = self.sd_config()
        probe = None
        if isinstance(oracle, GaussianMixtureModel):
            oracle = AnalyticIMCF(oracle, flow.schedule)
        elif oracle == "sampler":
            sc = SamplerConfig(self.sampler, self.sampler_steps, rng_seed=self.random_state)
            oracle, probe = sampler_oracle(flow, z, sc, flow.schedule, cfg.n_imcf, cfg.n_outer, dim)
        self.report_ = total_schedule_deviation(flow, oracle, z, cfg, flow.schedule, self.random_state, probe)
        return self

    def score(self, flow=None, z=None):
        return self.report_.total_sd


# ---------------------------------------------------------------------------
# total-variation bound on a 1-D density grid


class InstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class DensityGrid:
    x_min: float = -4.0
    x_max: float = 4.0
    n_cells: int = 800

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def centers(self):
        return self.x_min + self.dx * (np.arange(self.n_cells) + 0.5)

    @property
    def faces(self):
        return self.x_min + self.dx * np.arange(self.n_cells + 1)

    def refined(self, factor=2):
        return DensityGrid(self.x_min, self.x_max, self.n_cells * factor)


class TVBoundResult(NamedTuple):
    lhs: float
    rhs: float
    slack: float
    lhs_coarse: float
    holds: bool


def _gmm_density(gmm: GaussianMixtureModel, x, sigma):
    return np.exp(gmm.log_density(x[:, None], 1.0, sigma))


def evolve_density_1d(flow, z, gmm, schedule, grid: DensityGrid, s_start, s_end, record, n_steps=None, cfl=0.9):
    """Upwind finite-volume transport of the density forward from ``s_start``.

    Starts from the ideal path of ``gmm`` at ``s_start``; returns the cell
    densities at each time in ``record``.
    """
    x_c, x_f, dx = grid.centers, grid.faces, grid.dx
    record = np.asarray(record, dtype=float)
    probe_t = np.linspace(s_start, s_end, 9)
    vmax = max(np.max(np.abs(flow.velocity(x_f[:, None], z, float(t))[:, 0])) for t in probe_t)
    span = s_end - s_start
    needed = int(np.ceil(vmax * span / (cfl * dx))) if vmax > 0 else 1
    if n_steps is None:
        n_steps = max(needed, 1)
    ds = span / n_steps
    courant = vmax * ds / dx
    if courant > 1.0:
        raise InstabilityError(
            f"CFL number {courant:.3f} > 1; use at least {needed} steps (got {n_steps})"
        )
    p = _gmm_density(gmm, x_c, schedule.sigma(s_start))
    out = []
    rec_i = 0
    s = s_start
    for k in range(n_steps + 1):
        while rec_i < record.size and record[rec_i] <= s + 0.5 * ds:
            out.append(p.copy())
            rec_i += 1
        if k == n_steps:
            break
        v = flow.velocity(x_f[1:-1, None], z, s)[:, 0]
        flux = np.zeros(grid.n_cells + 1)
        flux[1:-1] = np.where(v > 0, v * p[:-1], v * p[1:])
        p = p - ds / dx * np.diff(flux)
        s = s_start + (k + 1) * ds
        if not np.all(np.isfinite(p)):
            raise InstabilityError(f"non-finite density at step {k}")
    while rec_i < record.size:
        out.append(p.copy())
        rec_i += 1
    return np.array(out)


def _mean_tv(flow, z, gmm, schedule, grid, s_start, s_end, record, n_steps):
    dens = evolve_density_1d(flow, z, gmm, schedule, grid, s_start, s_end, record, n_steps)
    tv = []
    for s, p in zip(record, dens):
        ref = _gmm_density(gmm, grid.centers, schedule.sigma(s))
        tv.append(0.5 * np.sum(np.abs(p - ref)) * grid.dx)
    return float(np.mean(tv))


def tv_bound_check_1d(
    flow,
    imcf_gmm: GaussianMixtureModel,
    z,
    grid: DensityGrid,
    schedule: DiffusionSchedule,
    s_start: float = 1.0 / 32,
    s_end: float = 0.5,
    n_record: int = 16,
    n_outer: int = 4096,
    seed: int = 0,
    n_steps: int | None = None,
) -> TVBoundResult:
    """Average TV between the transported density and the ideal path vs. the integrated deviation.

    Both paths agree at ``s_start``; TV is averaged over a uniform grid on
    ``[s_start, s_end]`` and compared with the deviation integrated over the
    same interval (true scale, not the c2 = 1 convention). The slack is twice
    the change in the average TV when the grid is refined by 2.
    """
    if imcf_gmm.dim != 1:
        raise ValueError("the TV check is one-dimensional")
    record = np.linspace(s_start, s_end, n_record)
    lhs_coarse = _mean_tv(flow, z, imcf_gmm, schedule, grid, s_start, s_end, record, n_steps)
    fine_steps = None if n_steps is None else 2 * n_steps
    lhs = _mean_tv(flow, z, imcf_gmm, schedule, grid.refined(), s_start, s_end, record, fine_steps)
    slack = 2.0 * abs(lhs - lhs_coarse)

    strategy = DivergenceStrategy.Analytic if flow.has_divergence else DivergenceStrategy.FiniteDifference
    cfg = SDConfig(n_outer=n_outer, divergence_strategy=strategy, s_grid=record, report_c2_one=False)
    report = total_schedule_deviation(flow, AnalyticIMCF(imcf_gmm, schedule), z, cfg, schedule, seed)
    rhs = report.total_sd
    return TVBoundResult(lhs, rhs, slack, lhs_coarse, bool(lhs <= rhs + slack))
