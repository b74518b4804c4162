"""Self-guidance across the conditioning space.

Flows anchored at a few condition values are blended with weights that depend
only on ``z``: natural-cubic-spline cardinal weights for discrete support, or
a heavy-tailed kernel for the two-anchor continuous case.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flows import ConditionalFlowField, DivergenceUnavailable, as_points

__all__ = [
    "DegenerateSupportError",
    "SplineWeights",
    "solve_spline_weights",
    "thomas_solve",
    "GuidanceKernel",
    "GuidedFlow",
    "SplineGuidedFlow",
    "KernelGuidedFlow",
    "spline_guided_flow",
    "kernel_guided_flow",
    "variance_blend_beta",
    "variance_blend_score",
]


class DegenerateSupportError(ValueError):
    """Knots are repeated."""


def thomas_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system; ``rhs`` may have trailing columns.

    ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` (``lower[0]`` unused),
    ``upper[i]`` multiplies ``x[i+1]`` (``upper[-1]`` unused).
    """
    n = len(diag)
    c = np.zeros(n)
    d = np.array(rhs, dtype=float)
    b = np.array(diag, dtype=float)
    c[0] = upper[0] / b[0] if n > 1 else 0.0
    d[0] = d[0] / b[0]
    for i in range(1, n):
        m = b[i] - lower[i] * c[i - 1]
        if i < n - 1:
            c[i] = upper[i] / m
        d[i] = (d[i] - lower[i] * d[i - 1]) / m
    for i in range(n - 2, -1, -1):
        d[i] = d[i] - c[i] * d[i + 1]
    return d


@dataclass(frozen=True)
class SplineWeights:
    """Cardinal natural-cubic-spline basis over scalar knots.

    ``coef[i, j]`` holds ``(a, b, c, d)`` of basis function ``i`` on interval
    ``j``: ``a + b t + c t^2 + d t^3`` with ``t = z - knots[j]``.
    """

    knots: np.ndarray
    coef: np.ndarray
    left_slope: np.ndarray
    right_slope: np.ndarray

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]

    def _locate(self, z):
        z = np.asarray(z, dtype=float)
        j = np.searchsorted(self.knots, z, side="right") - 1
        return z, np.clip(j, 0, self.n_knots - 2)

    def evaluate(self, z, derivative: int = 0) -> np.ndarray:
        """Weights ``p_i(z)`` for every basis ``i``; shape ``(n_knots,)`` or ``(n_knots, m)``."""
        z, j = self._locate(z)
        a, b, c, d = np.moveaxis(self.coef[:, j], -1, 0)
        t = z - self.knots[j]
        if derivative == 0:
            inside = a + t * (b + t * (c + t * d))
        elif derivative == 1:
            inside = b + t * (2 * c + 3 * t * d)
        elif derivative == 2:
            inside = 2 * c + 6 * t * d
        else:
            raise ValueError("derivative must be 0, 1 or 2")
        z0, z1 = self.knots[0], self.knots[-1]
        lo = z < z0
        hi = z > z1
        if np.any(lo) or np.any(hi):
            eye = np.eye(self.n_knots)
            if z.ndim:
                eye = eye[:, :, None]
                ls, rs = self.left_slope[:, None], self.right_slope[:, None]
            else:
                ls, rs = self.left_slope, self.right_slope
            if derivative == 0:
                left = eye[:, 0] + ls * (z - z0)
                right = eye[:, -1] + rs * (z - z1)
            elif derivative == 1:
                left, right = ls * np.ones_like(z), rs * np.ones_like(z)
            else:
                left = right = np.zeros_like(inside)
            inside = np.where(lo, left, np.where(hi, right, inside))
        return inside

    def __call__(self, z):
        return self.evaluate(z)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["basis", "interval", "z_left", "z_right", "a", "b", "c", "d"])
            for i in range(self.n_knots):
                for j in range(self.n_knots - 1):
                    w.writerow([i, j, repr(self.knots[j]), repr(self.knots[j + 1]), *map(repr, self.coef[i, j])])


def solve_spline_weights(knots: Sequence[float]) -> SplineWeights:
    """Cardinal weights of the natural cubic spline through sorted scalar ``knots``.

    Each basis function interpolates the indicator of one knot, has zero second
    derivative at both end knots and continues linearly outside the knot range.
    """
    z = np.asarray(knots, dtype=float).ravel()
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least two knots")
    h = np.diff(z)
    if np.any(h == 0):
        raise DegenerateSupportError("duplicate knots")
    if np.any(h < 0):
        raise ValueError("knots must be sorted in increasing order")

    # Second derivatives M at interior knots; natural ends give M_0 = M_{n-1} = 0.
    values = np.eye(n)
    moments = np.zeros((n, n))
    if n > 2:
        m = n - 2
        diag = 2.0 * (h[:-1] + h[1:])
        lower = np.concatenate([[0.0], h[1:-1]])
        upper = np.concatenate([h[1:-1], [0.0]])
        slopes = np.diff(values, axis=1) / h
        rhs = 6.0 * (slopes[:, 1:] - slopes[:, :-1])
        moments[:, 1:-1] = thomas_solve(lower[:m], diag, upper[:m], rhs.T).T

    a = values[:, :-1]
    c = moments[:, :-1] / 2.0
    d = (moments[:, 1:] - moments[:, :-1]) / (6.0 * h)
    b = (values[:, 1:] - values[:, :-1]) / h - h * (2.0 * moments[:, :-1] + moments[:, 1:]) / 6.0
    coef = np.stack([a, b, c, d], axis=-1)
    left_slope = b[:, 0].copy()
    hl = h[-1]
    right_slope = b[:, -1] + 2 * c[:, -1] * hl + 3 * d[:, -1] * hl**2
    return SplineWeights(z, coef, left_slope, right_slope)


@dataclass(frozen=True)
class GuidanceKernel:
    """``gamma(u) = c1 * (1 + c2 u^2)^(-3/2)``, a cubic-tail smoothing kernel."""

    c1: float = 1.5
    c2: float = 16.0

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("kernel constants must be positive")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.c1 * (1.0 + self.c2 * u * u) ** -1.5

    def weights(self, z) -> np.ndarray:
        g0, g1 = self(z), self(1.0 - np.asarray(z, dtype=float))
        return np.array([g0, g1]) / (g0 + g1)


class GuidedFlow(ConditionalFlowField):
    """``sum_i w_i(z) * flow_i(x, z_i, s)`` for anchor conditions ``z_i``."""

    def __init__(self, flows: Sequence[ConditionalFlowField], anchors: Sequence, schedule=None):
        if len(flows) != len(anchors):
            raise ValueError("one base flow per anchor is required")
        if not flows:
            raise ValueError("no base flows")
        super().__init__(schedule if schedule is not None else flows[0].schedule)
        self.flows = list(flows)
        self.anchors = list(anchors)
        self.has_divergence = all(f.has_divergence for f in self.flows)

    def weights(self, z) -> np.ndarray:
        raise NotImplementedError

    def _combine(self, method, x, z, s):
        w = self.weights(z)
        out = None
        for wi, f, zi in zip(w, self.flows, self.anchors):
            val = getattr(f, method)(x, zi, s)
            if out is None:
                out = wi * val
            else:
                if np.shape(val) != np.shape(out):
                    raise ValueError("base flows disagree on output dimension")
                out = out + wi * val
        return out

    def velocity(self, x, z, s):
        return self._combine("velocity", as_points(x), z, s)

    def epsilon(self, x, z, s):
        return self._combine("epsilon", as_points(x), z, s)

    def divergence(self, x, z, s):
        if not self.has_divergence:
            raise DivergenceUnavailable("a base flow lacks an analytic divergence")
        return self._combine("divergence", as_points(x), z, s)

    def epsilon_divergence(self, x, z, s):
        if not self.has_divergence:
            raise DivergenceUnavailable("a base flow lacks an analytic divergence")
        return self._combine("epsilon_divergence", as_points(x), z, s)


class SplineGuidedFlow(GuidedFlow):
    def __init__(self, knots, flows, schedule=None):
        self.spline = solve_spline_weights(knots)
        super().__init__(flows, list(self.spline.knots), schedule)

    def weights(self, z):
        return self.spline.evaluate(float(np.asarray(z).ravel()[0]))


class KernelGuidedFlow(GuidedFlow):
    """Two-anchor blend at ``z = 0`` and ``z = 1`` with kernel weights."""

    def __init__(self, flow0, flow1, kernel: GuidanceKernel | None = None, schedule=None):
        super().__init__([flow0, flow1], [0.0, 1.0], schedule)
        self.kernel = kernel or GuidanceKernel()

    def weights(self, z):
        return self.kernel.weights(float(np.asarray(z).ravel()[0]))


def spline_guided_flow(x, z, s, base_flows, knots) -> np.ndarray:
    return SplineGuidedFlow(knots, base_flows).velocity(x, z, s)


def kernel_guided_flow(x, z, s, flow0, flow1, kernel: GuidanceKernel | None = None) -> np.ndarray:
    return KernelGuidedFlow(flow0, flow1, kernel).velocity(x, z, s)


def variance_blend_beta(s, c, sigma_bar, k, schedule):
    """``beta(s) = (sb^2 + sigma^2) / ((1 + c (k^2 - 1)) sb^2 + sigma^2)``."""
    sig2 = np.asarray(schedule.sigma(s)) ** 2
    sb2 = sigma_bar**2
    return (sb2 + sig2) / ((1.0 + c * (k * k - 1.0)) * sb2 + sig2)


def variance_blend_score(x, s, c, sigma_bar, k, schedule):
    """Score of ``c * N(0, sb^2) + (1 - c) * N(0, k^2 sb^2)`` blended at the flow level.

    Blending the two scores with weights ``c`` and ``1 - c`` gives the score of
    a centred Gaussian whose variance is ``sb^2 (1 + (1 - c)(k^2 - 1) beta(s)) + sigma^2``,
    i.e. a Gaussian noised along a different schedule. Variance-exploding only.
    """
    if not schedule.is_ve:
        raise ValueError("the closed form assumes alpha = 1")
    beta = variance_blend_beta(s, c, sigma_bar, k, schedule)
    sb2 = sigma_bar**2
    var = sb2 + sb2 * (1.0 - c) * (k * k - 1.0) * beta + schedule.sigma(s) ** 2
    return -np.asarray(x, dtype=float) / var
