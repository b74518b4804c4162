"""Diffusion schedules and the coefficient algebra built on them.

Time runs over ``s in [0, 1]``; ``s = 0`` is (nearly) clean data and ``s = 1``
is pure noise. The variance-exploding convention (``alpha == 1``) is the
default everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "DomainError",
    "SingularScheduleError",
    "ScheduleCoefficients",
    "DiffusionSchedule",
    "LogLinearVE",
    "GeneralNormalized",
    "time_grid",
    "schedule_from_config",
]


class DomainError(ValueError):
    """Raised when a time value falls outside ``[0, 1]``."""


class SingularScheduleError(ZeroDivisionError):
    """Raised when a coefficient would divide by ``sigma(s) = 0`` or ``alpha(s) = 0``."""


@dataclass(frozen=True)
class ScheduleCoefficients:
    c1: float
    c2: float
    gamma1: float
    gamma2: float


def _check_time(s):
    arr = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {s!r}")
    return arr


class DiffusionSchedule:
    """Base class: subclasses provide ``_sigma``, ``_sigma_dot``, ``_alpha``, ``_alpha_dot``."""

    kind: str = "abstract"

    @property
    def is_ve(self) -> bool:
        return False

    def sigma(self, s):
        return self._out(self._sigma(_check_time(s)), s)

    def sigma_dot(self, s):
        return self._out(self._sigma_dot(_check_time(s)), s)

    def alpha(self, s):
        return self._out(self._alpha(_check_time(s)), s)

    def alpha_dot(self, s):
        return self._out(self._alpha_dot(_check_time(s)), s)

    @staticmethod
    def _out(val, s):
        val = np.asarray(val, dtype=float)
        if np.ndim(s) == 0:
            return float(val)
        return val

    def coefficients(self, s: float) -> ScheduleCoefficients:
        """Return ``c1, c2, gamma1, gamma2`` at a single time ``s``.

        The score form of the ideal flow is ``gamma1 * score + gamma2 * x`` and
        the denoising form is ``c1 * E[X0 | x] + c2 * x``.
        """
        sig = self.sigma(s)
        sd = self.sigma_dot(s)
        a = self.alpha(s)
        ad = self.alpha_dot(s)
        if sig == 0.0:
            raise SingularScheduleError(f"c2 undefined: sigma({s}) = 0")
        if a == 0.0:
            raise SingularScheduleError(f"gamma2 undefined: alpha({s}) = 0")
        c2 = sd / sig
        return ScheduleCoefficients(
            c1=ad - c2 * a,
            c2=c2,
            gamma1=(ad / a) * sig**2 - sd * sig,
            gamma2=ad / a,
        )

    def normalized(self) -> "GeneralNormalized":
        """Map ``x -> x / (1 + sigma(s))``.

        Gives ``alpha_eff = 1 / (1 + sigma)`` and ``sigma_eff = sigma / (1 + sigma)``.
        Only meaningful for VE schedules.
        """
        if not self.is_ve:
            raise ValueError("normalization map applies to VE schedules only")
        sig, sd = self._sigma, self._sigma_dot
        return GeneralNormalized(
            sigma_fn=lambda s: sig(s) / (1.0 + sig(s)),
            sigma_dot_fn=lambda s: sd(s) / (1.0 + sig(s)) ** 2,
            alpha_fn=lambda s: 1.0 / (1.0 + sig(s)),
            alpha_dot_fn=lambda s: -sd(s) / (1.0 + sig(s)) ** 2,
            check_boundary=False,
        )


class LogLinearVE(DiffusionSchedule):
    """``sigma(s) = sigma_min * exp(c2 * s)`` with ``alpha == 1``."""

    kind = "LogLinearVE"

    def __init__(self, sigma_min: float = 5e-4, sigma_max: float = 5.0):
        if not (sigma_min > 0 and sigma_max > 0):
            raise ValueError("sigma_min and sigma_max must be positive")
        if sigma_max < sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.log_ratio = math.log(self.sigma_max / self.sigma_min)

    @property
    def is_ve(self) -> bool:
        return True

    def _sigma(self, s):
        return self.sigma_min * np.exp(self.log_ratio * s)

    def _sigma_dot(self, s):
        return self.log_ratio * self._sigma(s)

    def _alpha(self, s):
        return np.ones_like(s, dtype=float)

    def _alpha_dot(self, s):
        return np.zeros_like(s, dtype=float)

    def __repr__(self):
        return f"LogLinearVE(sigma_min={self.sigma_min!r}, sigma_max={self.sigma_max!r})"

    def to_config(self) -> dict:
        return {"kind": self.kind, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}


class GeneralNormalized(DiffusionSchedule):
    """A schedule given by callables for sigma, alpha and their derivatives."""

    kind = "GeneralNormalized"

    def __init__(
        self,
        sigma_fn: Callable,
        sigma_dot_fn: Callable,
        alpha_fn: Callable,
        alpha_dot_fn: Callable,
        check_boundary: bool = True,
    ):
        self._sigma = sigma_fn
        self._sigma_dot = sigma_dot_fn
        self._alpha = alpha_fn
        self._alpha_dot = alpha_dot_fn
        if check_boundary:
            ends = (sigma_fn(1.0), alpha_fn(0.0), alpha_fn(1.0), sigma_fn(0.0))
            if not np.allclose(ends, (1.0, 1.0, 0.0, 0.0), atol=1e-12):
                raise ValueError(
                    "normalized schedule needs sigma(1) = alpha(0) = 1 and alpha(1) = sigma(0) = 0"
                )

    @property
    def is_ve(self) -> bool:
        return False


def time_grid(points: int, margin: float | None = None) -> np.ndarray:
    """Uniform grid of ``points`` times strictly inside (0, 1).

    With the default margin ``1 / (2 * points)`` this is the cell-midpoint grid.
    """
    if points < 1:
        raise ValueError("points must be >= 1")
    if margin is None:
        margin = 1.0 / (2 * points)
    if not 0.0 < margin < 0.5:
        raise ValueError("margin must lie in (0, 0.5)")
    if points == 1:
        return np.array([0.5])
    return np.linspace(margin, 1.0 - margin, points)


def schedule_from_config(cfg: dict) -> LogLinearVE:
    kind = cfg.get("kind", "LogLinearVE")
    if kind != "LogLinearVE":
        raise ValueError(f"schedule.kind: unsupported schedule {kind!r}")
    return LogLinearVE(float(cfg.get("sigma_min", 5e-4)), float(cfg.get("sigma_max", 5.0)))
