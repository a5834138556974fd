"""Training-sample generation: near-surface SDF samples, FPS, subsets, point clouds."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import DEFAULT_BOUNDS, EmptySurfaceError, TriangleMesh, marching_cubes, mesh_sdf, sample_grid, sample_surface

SIGMAS = (0.012, 0.035)
N_SURFACE = 250_000
N_UNIFORM = 25_000
SUBSET_SIZE = 8192
N_RAW = 15_000
N_POINTS = 4096


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class SdfSampleSet:
    """Sample positions and their signed distances, surface-σ₁ block first,
    then surface-σ₂, then uniform."""

    positions: np.ndarray
    values: np.ndarray
    n_surface: int
    n_uniform: int
    shape_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.positions) != len(self.values):
            raise ValueError("positions and values differ in length")
        if len(self) != 2 * self.n_surface + self.n_uniform:
            raise ValueError("sample count must equal 2 * n_surface + n_uniform")

    def __len__(self) -> int:
        return len(self.values)


def generate_sdf_samples(
    shape,
    n_surface: int,
    n_uniform: int,
    sigmas: tuple[float, float] = SIGMAS,
    rng_seed=0,
    sigma_is_variance: bool = True,
    mesh: TriangleMesh | None = None,
    shape_id: str = "",
) -> SdfSampleSet:
    """Near-surface and uniform SDF samples for one shape.

    ``shape`` is either a callable analytic SDF or a :class:`TriangleMesh`.
    Surface points come from ``mesh`` (or the shape itself when it is a mesh;
    or a 64³ marching-cubes mesh of the analytic field).  Each surface point
    yields two samples, perturbed by isotropic Gaussian noise with the two
    ``sigmas`` (variances unless ``sigma_is_variance`` is False).  Every value
    is the exact evaluator output at the final position.
    """
    if n_surface < 0 or n_uniform < 0:
        raise ValueError("sample counts must be non-negative")
    if min(sigmas) <= 0:
        raise ValueError("sigmas must be positive")
    rng = _rng(rng_seed)
    if isinstance(shape, TriangleMesh):
        surface = shape
        evaluate: Callable = lambda p: mesh_sdf(shape, p)
    else:
        surface = mesh if mesh is not None else marching_cubes(sample_grid(shape, 64, DEFAULT_BOUNDS))
        evaluate = shape
    if surface.is_empty:
        raise EmptySurfaceError("no surface")

    stds = [np.sqrt(s) if sigma_is_variance else float(s) for s in sigmas]
    blocks = []
    if n_surface:
        base = sample_surface(surface, n_surface, rng)
        for std in stds:
            blocks.append(base + rng.normal(0.0, std, size=base.shape))
    blocks.append(rng.uniform(-0.5, 0.5, size=(n_uniform, 3)))
    pos = np.concatenate(blocks, axis=0)
    return SdfSampleSet(pos, evaluate(pos) if len(pos) else np.zeros(0), n_surface, n_uniform, shape_id)


def draw_training_subset(samples: SdfSampleSet, m: int, rng_seed=0) -> tuple[np.ndarray, np.ndarray]:
    """``m`` samples uniformly without replacement; returns (positions, values)."""
    if m > len(samples):
        raise ValueError(f"subset size {m} exceeds {len(samples)} samples")
    idx = _rng(rng_seed).choice(len(samples), size=m, replace=False)
    return samples.positions[idx], samples.values[idx]


def fps_indices(points: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min selection; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ValueError("insufficient points")
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.empty(k, dtype=np.int64)
    out[0] = start_index
    dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        out[i] = j
        np.minimum(dist, np.sum((pts - pts[j]) ** 2, axis=1), out=dist)
    return out


def farthest_point_sample(points: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    return np.asarray(points)[fps_indices(points, k, start_index)]


def sample_polylines(polylines: Sequence[np.ndarray], n: int, rng_seed=0) -> np.ndarray:
    """``n`` points uniformly by arc length over a set of polylines."""
    segs = [np.stack([p[:-1], p[1:]], axis=1) for p in map(np.asarray, polylines) if len(p) >= 2]
    if not segs:
        raise EmptySurfaceError("no strokes")
    segs = np.concatenate(segs, axis=0)
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    if lengths.sum() <= 0:
        raise EmptySurfaceError("strokes have zero length")
    rng = _rng(rng_seed)
    cdf = np.cumsum(lengths) / lengths.sum()
    which = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(segs) - 1)
    t = rng.random(n)[:, None]
    return segs[which, 0] + t * (segs[which, 1] - segs[which, 0])


def make_point_cloud(source, n_raw: int = N_RAW, n_final: int = N_POINTS, rng_seed=0) -> np.ndarray:
    """Dense uniform sampling of a mesh or stroke set, then FPS down to ``n_final``.

    Raw samples are sorted lexicographically first so the FPS start (index 0)
    is an extreme point; on a single stroke two picks land on its endpoints.
    """
    if n_final > n_raw:
        raise ValueError("n_final must not exceed n_raw")
    if isinstance(source, TriangleMesh):
        raw = sample_surface(source, n_raw, rng_seed)
    else:
        raw = sample_polylines(source, n_raw, rng_seed)
    raw = raw[np.lexsort(raw.T[::-1])]
    return farthest_point_sample(raw, n_final, 0)


# ----------------------------------------------------------------------------
# file formats

SAMPLES_MAGIC = b"SFS1"
CLOUD_MAGIC = b"SFP1"


def save_samples(samples: SdfSampleSet, path: str | Path) -> None:
    """``SFS1`` | u32 n_surface | u32 n_uniform | u32 total | f32 (x, y, z, s) records."""
    header = SAMPLES_MAGIC + struct.pack("<3I", samples.n_surface, samples.n_uniform, len(samples))
    body = np.concatenate([samples.positions, samples.values[:, None]], axis=1).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_samples(path: str | Path, shape_id: str = "") -> SdfSampleSet:
    buf = Path(path).read_bytes()
    if buf[:4] != SAMPLES_MAGIC:
        raise ValueError("not an SFS1 sample file")
    n_surface, n_uniform, total = struct.unpack_from("<3I", buf, 4)
    rec = np.frombuffer(buf, dtype="<f4", offset=16, count=4 * total).reshape(total, 4).astype(np.float64)
    return SdfSampleSet(rec[:, :3], rec[:, 3], n_surface, n_uniform, shape_id)


def save_cloud(points: np.ndarray, path: str | Path, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if binary:
        Path(path).write_bytes(CLOUD_MAGIC + struct.pack("<I", len(pts)) + pts.astype("<f4").tobytes())
    else:
        Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


def load_cloud(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] == CLOUD_MAGIC:
        (n,) = struct.unpack_from("<I", buf, 4)
        return np.frombuffer(buf, dtype="<f4", offset=8, count=3 * n).reshape(n, 3).astype(np.float64)
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)
