"""Empirical 1-Wasserstein distances between equal-size sample sets."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .flows import SampleSet, as_points

__all__ = ["SizeMismatchError", "cost_matrix", "wasserstein1_1d", "emd_exact", "DEFAULT_CAP"]

DEFAULT_CAP = 512


class SizeMismatchError(ValueError):
    pass


def _pts(a):
    return a.points if isinstance(a, SampleSet) else as_points(a)


def cost_matrix(a, b) -> np.ndarray:
    return cdist(_pts(a), _pts(b))


def wasserstein1_1d(a, b) -> float:
    """Mean absolute difference of the sorted samples."""
    pa, pb = _pts(a), _pts(b)
    if pa.shape[1] != 1 or pb.shape[1] != 1:
        raise ValueError("wasserstein1_1d needs scalar samples")
    if pa.shape[0] != pb.shape[0]:
        raise SizeMismatchError(f"sizes differ: {pa.shape[0]} vs {pb.shape[0]}")
    return float(np.mean(np.abs(np.sort(pa[:, 0]) - np.sort(pb[:, 0]))))


def _canonical(p: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(p[np.lexsort(p.T[::-1])])


def emd_exact(a, b, cap: int = DEFAULT_CAP) -> float:
    """Exact optimal matching cost (uniform weights, Euclidean ground cost)."""
    pa, pb = _pts(a), _pts(b)
    if pa.shape[0] != pb.shape[0]:
        raise SizeMismatchError(f"sizes differ: {pa.shape[0]} vs {pb.shape[0]}")
    if pa.shape[0] > cap:
        raise ValueError(f"{pa.shape[0]} points exceeds the cap of {cap}; subsample both sets first")
    # canonical row order and operand orientation: near-tied optimal plans
    # would otherwise depend on input order and break exact symmetry
    pa, pb = _canonical(pa), _canonical(pb)
    if pb.tobytes() < pa.tobytes():
        pa, pb = pb, pa
    cost = cost_matrix(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / pa.shape[0]
