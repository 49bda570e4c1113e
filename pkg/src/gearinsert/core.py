"""Geometry, grid indexing, pinhole camera model and seeded RNG streams.

Positions in the alignment plane are plain ``numpy`` arrays of shape ``(2,)``
holding millimeters. Grid point ``(col, row)`` sits at
``(col * cell_mm, row * cell_mm)``; the origin is the lower-left sample of the
map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GridIndex(NamedTuple):
    col: int
    row: int


@dataclass(frozen=True)
class GridMap:
    n_cols: int = 35
    n_rows: int = 30
    cell_mm: float = 1.0

    def __post_init__(self):
        if self.n_cols < 2 or self.n_rows < 2:
            raise ValueError(f"grid needs at least 2x2 points, got {self.n_cols}x{self.n_rows}")
        if not self.cell_mm > 0:
            raise ValueError(f"cell_mm must be positive, got {self.cell_mm}")

    @property
    def target(self) -> np.ndarray:
        """Peg center in grid units (half-integer x for odd column counts)."""
        return np.array([self.n_cols / 2.0, self.n_rows / 2.0])

    @property
    def target_mm(self) -> np.ndarray:
        return self.target * self.cell_mm

    @property
    def extent_mm(self) -> np.ndarray:
        return np.array([(self.n_cols - 1) * self.cell_mm, (self.n_rows - 1) * self.cell_mm])

    @property
    def n_points(self) -> int:
        return self.n_cols * self.n_rows

    def coords(self, idx: GridIndex) -> np.ndarray:
        return np.array([idx.col * self.cell_mm, idx.row * self.cell_mm])

    def indices(self) -> list[GridIndex]:
        """All grid indices, row-major (row outer, col inner)."""
        return [GridIndex(c, r) for r in range(self.n_rows) for c in range(self.n_cols)]

    def flat(self, idx: GridIndex) -> int:
        return idx.row * self.n_cols + idx.col

    def target_cells(self) -> frozenset[GridIndex]:
        """Grid points minimizing the normalized Manhattan distance to the peg."""
        tx, ty = self.target
        cols = _nearest_ints(tx, self.n_cols)
        rows = _nearest_ints(ty, self.n_rows)
        return frozenset(GridIndex(c, r) for c in cols for r in rows)


def _nearest_ints(v: float, n: int) -> list[int]:
    lo = math.floor(v)
    best = min(abs(v - lo), abs(lo + 1 - v))
    return [c for c in (lo, lo + 1) if abs(v - c) == best and 0 <= c < n]


def vec2(x: float, y: float) -> np.ndarray:
    p = np.array([float(x), float(y)])
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite position {p}")
    return p


def clamp_to_map(p: np.ndarray, gmap: GridMap) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), 0.0, gmap.extent_mm)


def _round_half_down(v: float) -> int:
    # nearest integer, exact ties go to the lower one
    return int(math.ceil(v - 0.5))


def snap_to_grid(p: np.ndarray, gmap: GridMap) -> GridIndex:
    """Nearest grid point to ``p`` after clamping into the map rectangle."""
    q = clamp_to_map(p, gmap) / gmap.cell_mm
    col = min(max(_round_half_down(q[0]), 0), gmap.n_cols - 1)
    row = min(max(_round_half_down(q[1]), 0), gmap.n_rows - 1)
    return GridIndex(col, row)


def in_bounds(p: np.ndarray, gmap: GridMap) -> bool:
    ext = gmap.extent_mm
    return bool(0.0 <= p[0] <= ext[0] and 0.0 <= p[1] <= ext[1])


def rotation(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


class InvalidDepthError(ValueError):
    pass


def deproject(u: float, v: float, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel ``(u, v)`` at ``depth`` meters into the camera frame."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def project(point: np.ndarray, K: CameraIntrinsics) -> tuple[float, float, float]:
    X, Y, Z = (float(c) for c in point)
    if not Z > 0:
        raise InvalidDepthError(f"point behind camera (Z={Z})")
    return K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy, Z


def peg_from_platform(platform_center: np.ndarray, relative_offset: np.ndarray) -> np.ndarray:
    return np.asarray(platform_center, dtype=float) - np.asarray(relative_offset, dtype=float)


@dataclass(frozen=True)
class SeedSpec:
    """Master seed; stream ``i`` is derived from ``(master_seed, i)`` only."""

    master_seed: int = 0

    def stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.master_seed & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(key))
        return np.random.Generator(np.random.PCG64(ss))


def rng_stream(master_seed: int, *key: int) -> np.random.Generator:
    return SeedSpec(master_seed).stream(*key)
