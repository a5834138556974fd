"""Regular scalar grids and isosurface extraction.

Extraction uses scikit-image's marching cubes (Lewiner tables).  Vertices lie
on lattice edges at the linear-interpolation crossing of ``iso``; triangles are
wound so normals point toward increasing field values (outward for an SDF).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from skimage import measure

from .mesh import TriangleMesh

DEFAULT_BOUNDS = (-0.55, 0.55)
GRID_MAGIC = b"SFG1"


@dataclass
class Grid3:
    """Scalar values on an ``(nx, ny, nz)`` lattice; ``values[i, j, k]`` sits at
    ``lo + (i, j, k) * spacing``."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError(f"grid needs resolution >= 2 per axis, got {self.values.shape}")
        if not np.all(self.hi > self.lo):
            raise ValueError("grid bounds must satisfy hi > lo")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.values.shape) - 1)


def grid_points(resolution: int | tuple[int, int, int], bounds=DEFAULT_BOUNDS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lattice node coordinates (C order over i, j, k) plus the bounds."""
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    lo, hi = _bounds(bounds)
    axes = [np.linspace(lo[d], hi[d], res[d]) for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts, lo, hi


def _bounds(bounds) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,)).copy()
    return lo, hi


def sample_grid(
    fn: Callable[[np.ndarray], np.ndarray],
    resolution: int | tuple[int, int, int] = 64,
    bounds=DEFAULT_BOUNDS,
    chunk: int = 65536,
) -> Grid3:
    pts, lo, hi = grid_points(resolution, bounds)
    vals = np.concatenate([np.asarray(fn(pts[s : s + chunk])).reshape(-1) for s in range(0, len(pts), chunk)])
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    return Grid3(vals.reshape(res), lo, hi)


def marching_cubes(grid: Grid3, iso: float = 0.0) -> TriangleMesh:
    """Triangle mesh of the ``iso`` level set; empty when the field never crosses it."""
    vals = np.asarray(grid.values, dtype=np.float64)
    if not np.isfinite(iso):
        raise ValueError("iso must be finite")
    if vals.min() >= iso or vals.max() <= iso:
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(vals, level=iso, spacing=tuple(grid.spacing), allow_degenerate=False)
    return TriangleMesh(verts + grid.lo, faces).compact()


def dump_grid(grid: Grid3, path: str | Path) -> None:
    """Little-endian: magic, 3 x u32 resolution, 6 x f64 bounds, f32 values (x fastest)."""
    nx, ny, nz = grid.resolution
    header = GRID_MAGIC + struct.pack("<3I", nx, ny, nz) + struct.pack("<6d", *grid.lo, *grid.hi)
    body = np.asarray(grid.values, dtype="<f4").transpose(2, 1, 0).tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path: str | Path) -> Grid3:
    buf = Path(path).read_bytes()
    if buf[:4] != GRID_MAGIC:
        raise ValueError("not an SFG1 grid file")
    nx, ny, nz = struct.unpack_from("<3I", buf, 4)
    bounds = struct.unpack_from("<6d", buf, 16)
    vals = np.frombuffer(buf, dtype="<f4", offset=64, count=nx * ny * nz).reshape(nz, ny, nx).transpose(2, 1, 0)
    return Grid3(vals.astype(np.float32), bounds[:3], bounds[3:])
