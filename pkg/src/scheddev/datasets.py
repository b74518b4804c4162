"""Toy conditional mixtures and the maze-trajectory dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .flows import GaussianMixtureModel

__all__ = [
    "Support",
    "ToySpec",
    "sample_toy",
    "toy_conditional_mixture",
    "ConnectivityError",
    "Maze",
    "MazeSpec",
    "enumerate_maze_paths",
    "column_probabilities",
    "path_probabilities",
    "de_casteljau",
    "composite_bezier",
    "sample_starts",
    "sample_path",
    "sample_maze_trajectory",
]

DEFAULT_ANCHORS = ((0.0, -1.0), (1.0, 0.0), (1.0, 1.0))


class Support(str, Enum):
    Discrete = "Discrete"
    Continuous = "Continuous"


@dataclass
class ToySpec:
    """Anchors are ``(z, x)`` pairs; one is picked uniformly per draw."""

    support: Support = Support.Discrete
    anchors: Sequence[tuple] = DEFAULT_ANCHORS
    noise_sigma: float = 0.1
    count: int = 100_000

    def __post_init__(self):
        self.support = Support(self.support)
        self.anchors = tuple((float(a), float(b)) for a, b in self.anchors)
        if not self.anchors:
            raise ValueError("anchors must be non-empty")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def sample_toy(spec: ToySpec, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Return ``(count, 2)`` rows of ``(z, x)``."""
    n = spec.count if count is None else count
    anchors = np.asarray(spec.anchors)
    pick = anchors[rng.integers(0, len(anchors), size=n)]
    out = pick.copy()
    out[:, 1] += spec.noise_sigma * rng.standard_normal(n)
    if spec.support is Support.Continuous:
        out[:, 0] += spec.noise_sigma * rng.standard_normal(n)
    return out


def toy_conditional_mixture(z: float, spec: ToySpec | None = None) -> GaussianMixtureModel:
    """Mixture of the anchors sharing condition ``z`` (discrete support)."""
    spec = spec or ToySpec()
    xs = [x for az, x in spec.anchors if az == z]
    if not xs:
        raise ValueError(f"no anchor at z = {z}")
    k = len(xs)
    return GaussianMixtureModel(np.full(k, 1.0 / k), np.array(xs)[:, None], np.full(k, spec.noise_sigma**2))


# ---------------------------------------------------------------------------
# maze


class ConnectivityError(RuntimeError):
    pass


Cell = tuple


class Maze:
    """Cells on an ``rows x cols`` grid with walls between neighbours.

    Text layout: a ``(2 rows + 1) x (2 cols + 1)`` character grid where cell
    ``(r, c)`` sits at ``(2r + 1, 2c + 1)``, ``#`` is a wall, ``.`` open and
    ``G`` marks the goal cell.
    """

    def __init__(self, text: str):
        lines = [ln.rstrip("\n") for ln in text.strip().splitlines()]
        if len(lines) < 3 or len(lines) % 2 == 0:
            raise ValueError("maze layout needs an odd number (>= 3) of lines")
        width = len(lines[0])
        if any(len(ln) != width for ln in lines) or width % 2 == 0:
            raise ValueError("maze lines must share one odd width")
        self.rows = (len(lines) - 1) // 2
        self.cols = (width - 1) // 2
        self.layout = lines
        self.goal = None
        self.adj: dict[Cell, list[Cell]] = {}
        for r in range(self.rows):
            for c in range(self.cols):
                ch = lines[2 * r + 1][2 * c + 1]
                if ch == "#":
                    raise ValueError(f"cell {(r, c)} is a wall in the layout")
                if ch == "G":
                    self.goal = (r, c)
                nbrs = []
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < self.rows and 0 <= cc < self.cols and lines[2 * r + 1 + dr][2 * c + 1 + dc] != "#":
                        nbrs.append((rr, cc))
                self.adj[(r, c)] = nbrs
        if self.goal is None:
            raise ValueError("maze layout has no goal cell 'G'")

    @classmethod
    def from_file(cls, path) -> "Maze":
        return cls(Path(path).read_text())

    @classmethod
    def default(cls) -> "Maze":
        return cls(resources.files("scheddev").joinpath("data/maze8.txt").read_text())

    def cells(self):
        return list(self.adj)

    @lru_cache(maxsize=None)
    def paths_from(self, start: Cell) -> tuple:
        return tuple(_enumerate(self, start))


def _enumerate(maze: Maze, start: Cell):
    if start not in maze.adj:
        raise ValueError(f"{start} is not a cell of the maze")
    found = []
    path = [start]
    on_path = {start}

    def dfs(cell):
        if cell == maze.goal:
            found.append(tuple(path))
            return
        for nxt in maze.adj[cell]:
            if nxt not in on_path:
                on_path.add(nxt)
                path.append(nxt)
                dfs(nxt)
                path.pop()
                on_path.discard(nxt)

    dfs(start)
    if not found:
        raise ConnectivityError(f"goal {maze.goal} unreachable from {start}")
    found.sort(key=len)
    return [(p, len(p) - 1) for p in found]


def enumerate_maze_paths(maze: Maze, start: Cell) -> list:
    """All simple paths from ``start`` to the goal as ``(cells, length)``, shortest first."""
    return list(maze.paths_from(tuple(start)))


@dataclass
class MazeSpec:
    maze: Maze = field(default_factory=Maze.default)
    path_points: int = 64
    bezier_noise: float = 0.04
    seed: int = 0


def column_probabilities(cols: int) -> np.ndarray:
    c = np.arange(cols)
    w = np.exp(-c / 2.0) + np.exp(-(cols - 1 - c) / 2.0)
    return w / w.sum()


def path_probabilities(lengths: Sequence[int]) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=float)
    w = np.exp(-(lengths - lengths.min()))
    return w / w.sum()


def de_casteljau(ctrl: np.ndarray, t) -> np.ndarray:
    """Evaluate a Bezier curve with control points ``ctrl`` at parameters ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None, None]
    pts = np.broadcast_to(ctrl, (t.shape[0],) + ctrl.shape).copy()
    while pts.shape[1] > 1:
        pts = (1 - t) * pts[:, :-1] + t * pts[:, 1:]
    return pts[:, 0]


def composite_bezier(points: np.ndarray, n_out: int = 64, per_segment: int = 64) -> np.ndarray:
    """Cubic Bezier pieces through ``points`` (Catmull-Rom tangents), resampled by arc length."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 1:
        return np.repeat(points, n_out, axis=0)
    tang = np.empty_like(points)
    tang[1:-1] = (points[2:] - points[:-2]) / 2.0
    tang[0] = points[1] - points[0]
    tang[-1] = points[-1] - points[-2]
    ts = np.linspace(0.0, 1.0, per_segment, endpoint=False)
    dense = []
    for i in range(points.shape[0] - 1):
        ctrl = np.array([points[i], points[i] + tang[i] / 3, points[i + 1] - tang[i + 1] / 3, points[i + 1]])
        dense.append(de_casteljau(ctrl, ts))
    dense.append(points[-1:])
    dense = np.concatenate(dense)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    target = np.linspace(0.0, arc[-1], n_out)
    return np.stack([np.interp(target, arc, dense[:, k]) for k in range(dense.shape[1])], axis=1)


def cell_center(cell: Cell) -> np.ndarray:
    """``(x, y) = (col + 0.5, row + 0.5)``."""
    return np.array([cell[1] + 0.5, cell[0] + 0.5])


def sample_starts(maze: Maze, rng: np.random.Generator, n: int) -> np.ndarray:
    """``(n, 2)`` integer ``(row, col)`` start cells: uniform row, two-sided exponential column."""
    rows = rng.integers(0, maze.rows, size=n)
    cols = rng.choice(maze.cols, size=n, p=column_probabilities(maze.cols))
    return np.stack([rows, cols], axis=1)


def sample_path(maze: Maze, start: Cell, rng: np.random.Generator, n: int | None = None):
    """Index into ``maze.paths_from(start)`` with weight ``exp(-(len - shortest))``."""
    paths = maze.paths_from(tuple(start))
    return rng.choice(len(paths), size=n, p=path_probabilities([length for _, length in paths]))


def sample_maze_trajectory(spec: MazeSpec, rng: np.random.Generator):
    """Return ``(z, x)``: the start point ``(2,)`` and a ``(path_points, 2)`` trajectory."""
    maze = spec.maze
    start = tuple(int(v) for v in sample_starts(maze, rng, 1)[0])
    cells, _ = maze.paths_from(start)[int(sample_path(maze, start, rng))]
    ctrl = np.array([cell_center(c) for c in cells])
    ctrl = ctrl + math.sqrt(spec.bezier_noise) * rng.standard_normal(ctrl.shape)
    return cell_center(start), composite_bezier(ctrl, spec.path_points)
