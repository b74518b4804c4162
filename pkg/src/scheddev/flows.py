"""Conditional flow fields, Gaussian-mixture ideal flows and the empirical IMCF oracle.

Shapes: points are ``(n, d)`` arrays, the condition ``z`` is a scalar or a
small vector, and ``s`` is a scalar time. The noise-prediction
parameterization is ``epsilon = E[noise | x_s]`` so that, under VE schedules,
``velocity = sigma_dot(s) * epsilon`` and ``epsilon = -sigma(s) * score``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedules import DiffusionSchedule

__all__ = [
    "DivergenceUnavailable",
    "Provenance",
    "SampleSet",
    "GaussianMixtureModel",
    "ConditionalFlowField",
    "CallableFlow",
    "MixtureFlow",
    "mixture_score",
    "imcf_flow",
    "mixture_divergence",
    "empirical_epsilon_imcf",
    "EmpiricalIMCF",
    "AnalyticIMCF",
    "as_points",
]


class DivergenceUnavailable(RuntimeError):
    """The flow has no analytic divergence."""


class Provenance(str, Enum):
    DatasetDraw = "DatasetDraw"
    SamplerOutput = "SamplerOutput"


def as_points(x) -> np.ndarray:
    """Coerce scalars, 1-D vectors of scalars, or ``(n, d)`` arrays to ``(n, d)``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected points of shape (n, d), got {arr.shape}")
    return arr


@dataclass
class SampleSet:
    """An equally weighted point cloud for one condition ``z``."""

    points: np.ndarray
    condition: object = None
    provenance: Provenance = Provenance.DatasetDraw

    def __post_init__(self):
        self.points = as_points(self.points)
        if self.points.shape[0] == 0:
            raise ValueError("SampleSet must be non-empty")
        self.provenance = Provenance(self.provenance)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class GaussianMixtureModel:
    """Isotropic Gaussian mixture: weights ``(k,)``, means ``(k, d)``, variances ``(k,)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.asarray(self.means, dtype=float)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=float))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape[0] != k:
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")

    @classmethod
    def single(cls, mean, variance):
        return cls([1.0], np.atleast_1d(np.asarray(mean, dtype=float))[None, :], [variance])

    @classmethod
    def from_config(cls, components: Sequence[dict]) -> "GaussianMixtureModel":
        return cls(
            [c["weight"] for c in components],
            [np.atleast_1d(c["mean"]) for c in components],
            [c["variance"] for c in components],
        )

    def to_config(self) -> list[dict]:
        return [
            {"weight": float(w), "mean": [float(v) for v in m], "variance": float(var)}
            for w, m, var in zip(self.weights, self.means, self.variances)
        ]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def std(self) -> float:
        """Root of the average per-coordinate variance of the mixture."""
        m = self.mean
        second = self.weights @ (self.variances[:, None] + self.means**2)
        return float(np.sqrt(np.mean(second - m**2)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise

    # noised quantities: X_s = alpha * X0 + sigma * noise
    def _noised(self, alpha: float, sigma: float):
        return alpha * self.means, alpha**2 * self.variances + sigma**2

    def _responsibilities(self, x, means, tau):
        d = self.dim
        diff = x[:, None, :] - means[None, :, :]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        logits = np.log(self.weights)[None, :] - 0.5 * d * np.log(2 * np.pi * tau)[None, :] - sq / (2 * tau[None, :])
        norm = logsumexp(logits, axis=1, keepdims=True)
        return np.exp(logits - norm), diff, norm[:, 0]

    def log_density(self, x, alpha: float = 1.0, sigma: float = 0.0) -> np.ndarray:
        means, tau = self._noised(alpha, sigma)
        return self._responsibilities(as_points(x), means, tau)[2]

    def score(self, x, alpha: float = 1.0, sigma: float = 0.0) -> np.ndarray:
        means, tau = self._noised(alpha, sigma)
        r, diff, _ = self._responsibilities(as_points(x), means, tau)
        return -np.einsum("nk,nkd->nd", r / tau[None, :], diff)

    def laplacian_log_density(self, x, alpha: float = 1.0, sigma: float = 0.0) -> np.ndarray:
        """Trace of the Hessian of ``log p``.

        ``sum_k r_k (-d / tau_k + |g_k|^2) - |g|^2`` with per-component scores ``g_k``.
        """
        means, tau = self._noised(alpha, sigma)
        r, diff, _ = self._responsibilities(as_points(x), means, tau)
        gk = -diff / tau[None, :, None]
        g = np.einsum("nk,nkd->nd", r, gk)
        per = -self.dim / tau[None, :] + np.einsum("nkd,nkd->nk", gk, gk)
        return np.einsum("nk,nk->n", r, per) - np.einsum("nd,nd->n", g, g)

    def posterior_mean(self, x, alpha: float = 1.0, sigma: float = 0.0) -> np.ndarray:
        """``E[X0 | X_s = x]`` for ``X_s = alpha X0 + sigma noise``."""
        means, tau = self._noised(alpha, sigma)
        r, diff, _ = self._responsibilities(as_points(x), means, tau)
        gain = alpha * self.variances / tau
        per = self.means[None, :, :] + gain[None, :, None] * diff
        return np.einsum("nk,nkd->nd", r, per)


class ConditionalFlowField:
    """Evaluation contract for ``v_s(x, z)``.

    Subclasses implement ``epsilon`` (or override ``velocity``); those with an
    analytic divergence set ``has_divergence`` and implement ``divergence``.
    """

    has_divergence: bool = False

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule

    def epsilon(self, x, z, s: float) -> np.ndarray:
        return self.velocity(x, z, s) / self.schedule.sigma_dot(s)

    def velocity(self, x, z, s: float) -> np.ndarray:
        return self.schedule.sigma_dot(s) * self.epsilon(x, z, s)

    def divergence(self, x, z, s: float) -> np.ndarray:
        """Trace of the Jacobian of ``velocity`` in ``x``, shape ``(n,)``."""
        raise DivergenceUnavailable(f"{type(self).__name__} has no analytic divergence")

    def epsilon_divergence(self, x, z, s: float) -> np.ndarray:
        return self.divergence(x, z, s) / self.schedule.sigma_dot(s)


class CallableFlow(ConditionalFlowField):
    """Wrap plain functions ``eps_fn(x, z, s)`` (and optionally ``div_fn``) as a flow.

    ``div_fn`` returns the divergence of ``eps_fn``, not of the velocity.
    """

    def __init__(self, schedule, eps_fn: Callable, eps_div_fn: Callable | None = None):
        super().__init__(schedule)
        self._eps = eps_fn
        self._div = eps_div_fn
        self.has_divergence = eps_div_fn is not None

    def epsilon(self, x, z, s):
        return np.asarray(self._eps(as_points(x), z, s), dtype=float)

    def divergence(self, x, z, s):
        if self._div is None:
            return super().divergence(x, z, s)
        return self.schedule.sigma_dot(s) * np.asarray(self._div(as_points(x), z, s), dtype=float)

    def epsilon_divergence(self, x, z, s):
        if self._div is None:
            return super().divergence(x, z, s)
        return np.asarray(self._div(as_points(x), z, s), dtype=float)


def _alpha_sigma(schedule, s):
    return schedule.alpha(s), schedule.sigma(s)


def mixture_score(x, s: float, gmm: GaussianMixtureModel, schedule: DiffusionSchedule) -> np.ndarray:
    """Score of the mixture pushed through the forward noising to time ``s``."""
    a, sig = _alpha_sigma(schedule, s)
    return gmm.score(x, a, sig)


def imcf_flow(x, z, s: float, gmm: GaussianMixtureModel, schedule: DiffusionSchedule) -> np.ndarray:
    coef = schedule.coefficients(s)
    return coef.gamma1 * mixture_score(x, s, gmm, schedule) + coef.gamma2 * as_points(x)


def mixture_divergence(x, z, s: float, gmm: GaussianMixtureModel, schedule: DiffusionSchedule) -> np.ndarray:
    coef = schedule.coefficients(s)
    a, sig = _alpha_sigma(schedule, s)
    return coef.gamma1 * gmm.laplacian_log_density(x, a, sig) + coef.gamma2 * gmm.dim


class MixtureFlow(ConditionalFlowField):
    """Ideal (IMCF) flow of a Gaussian mixture, optionally depending on ``z``.

    ``gmm`` is either a fixed mixture or a callable ``z -> GaussianMixtureModel``.
    """

    has_divergence = True

    def __init__(self, gmm, schedule: DiffusionSchedule):
        super().__init__(schedule)
        self.gmm = gmm

    def mixture_for(self, z) -> GaussianMixtureModel:
        return self.gmm(z) if callable(self.gmm) else self.gmm

    def velocity(self, x, z, s):
        return imcf_flow(x, z, s, self.mixture_for(z), self.schedule)

    def epsilon(self, x, z, s):
        if self.schedule.is_ve:
            return -self.schedule.sigma(s) * mixture_score(x, s, self.mixture_for(z), self.schedule)
        return self.velocity(x, z, s) / self.schedule.sigma_dot(s)

    def divergence(self, x, z, s):
        return mixture_divergence(x, z, s, self.mixture_for(z), self.schedule)

    def epsilon_divergence(self, x, z, s):
        if self.schedule.is_ve:
            gmm = self.mixture_for(z)
            return -self.schedule.sigma(s) * gmm.laplacian_log_density(x, 1.0, self.schedule.sigma(s))
        return self.divergence(x, z, s) / self.schedule.sigma_dot(s)


def _softmax_terms(x, pts, sigma, chunk):
    """Yield ``(rows, weights, diffs)`` blocks of the kernel softmax over samples."""
    n = x.shape[0]
    for lo in range(0, n, chunk):
        xb = x[lo:lo + chunk]
        diff = xb[:, None, :] - pts[None, :, :]
        logits = -np.einsum("nkd,nkd->nk", diff, diff) / (2.0 * sigma**2)
        w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        yield slice(lo, lo + xb.shape[0]), w, diff


def _chunk_size(n_samples, dim, budget=4_000_000):
    return max(1, budget // max(1, n_samples * dim))


def empirical_epsilon_imcf(x, s: float, samples: SampleSet, schedule: DiffusionSchedule) -> np.ndarray:
    """Noise prediction of the ideal flow of an empirical distribution.

    ``sum_i softmax_i(-|x - x_i|^2 / (2 sigma^2)) (x - x_i) / sigma``.
    """
    return EmpiricalIMCF(samples, schedule).epsilon(x, s)


class EmpiricalIMCF:
    """IMCF oracle built from samples of ``p0`` (kernel-smoothed empirical score)."""

    def __init__(self, samples: SampleSet, schedule: DiffusionSchedule):
        if not schedule.is_ve:
            raise ValueError("the empirical IMCF oracle assumes a VE schedule")
        self.samples = samples if isinstance(samples, SampleSet) else SampleSet(samples)
        self.schedule = schedule
        self.degenerate = len(self.samples) < 2

    def epsilon(self, x, s):
        x = as_points(x)
        pts = self.samples.points
        sig = self.schedule.sigma(s)
        out = np.empty_like(x)
        for rows, w, diff in _softmax_terms(x, pts, sig, _chunk_size(len(pts), x.shape[1])):
            out[rows] = np.einsum("nk,nkd->nd", w, diff) / sig
        return out

    def epsilon_divergence(self, x, s):
        """``d / sigma - (E_w|x - x_i|^2 - |E_w(x - x_i)|^2) / sigma^3``."""
        x = as_points(x)
        pts = self.samples.points
        sig = self.schedule.sigma(s)
        d = x.shape[1]
        out = np.empty(x.shape[0])
        for rows, w, diff in _softmax_terms(x, pts, sig, _chunk_size(len(pts), d)):
            m = np.einsum("nk,nkd->nd", w, diff)
            second = np.einsum("nk,nk->n", w, np.einsum("nkd,nkd->nk", diff, diff))
            out[rows] = d / sig - (second - np.einsum("nd,nd->n", m, m)) / sig**3
        return out

    def sample_p0(self, n, rng):
        idx = rng.integers(0, len(self.samples), size=n)
        return self.samples.points[idx]


class AnalyticIMCF:
    """IMCF oracle with closed-form quantities from a Gaussian mixture ``p0``."""

    degenerate = False

    def __init__(self, gmm: GaussianMixtureModel, schedule: DiffusionSchedule):
        if not schedule.is_ve:
            raise ValueError("the analytic IMCF oracle assumes a VE schedule")
        self.gmm = gmm
        self.schedule = schedule

    def epsilon(self, x, s):
        sig = self.schedule.sigma(s)
        return -sig * self.gmm.score(x, 1.0, sig)

    def epsilon_divergence(self, x, s):
        sig = self.schedule.sigma(s)
        return -sig * self.gmm.laplacian_log_density(x, 1.0, sig)

    def sample_p0(self, n, rng):
        return self.gmm.sample(n, rng)
