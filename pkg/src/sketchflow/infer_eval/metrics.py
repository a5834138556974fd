"""Point-set and sketch-fidelity metrics.

Chamfer distance uses the squared convention: mean squared nearest-neighbour
distance in each direction, summed over both directions.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import TriangleMesh, sample_surface

CD_CONVENTION = "squared-mean, summed over both directions"


def _nn_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return d * d


def chamfer(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    return float(np.mean(_nn_sq(a, b))) + float(np.mean(_nn_sq(b, a)))


def chamfer_brute(a, b) -> float:
    """O(|A||B|) reference implementation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(d2.min(axis=1).mean()) + float(d2.min(axis=0).mean())


def fidelity_shape(mesh: TriangleMesh, reference: TriangleMesh, n_points: int = 4096, seed=0) -> float:
    """CD between ``n_points`` surface samples of each mesh; ``inf`` if ``mesh`` is empty."""
    if mesh.is_empty:
        return math.inf
    return chamfer(sample_surface(mesh, n_points, seed), sample_surface(reference, n_points, seed))


def fidelity_sketch(sdf, sketch_points) -> float:
    """Mean |SDF| at the sketch points; ``sdf`` maps (n, 3) -> (n,)."""
    pts = np.asarray(sketch_points, dtype=np.float64).reshape(-1, 3)
    return float(np.mean(np.abs(np.asarray(sdf(pts), dtype=np.float64))))


def diversity(meshes: list[TriangleMesh], n_points: int = 4096, seed=0) -> tuple[float, int]:
    """Mean CD over all unordered pairs of sampled meshes, and the number of empty meshes skipped.

    Returns ``nan`` when fewer than two nonempty meshes remain.
    """
    if len(meshes) < 2:
        raise ValueError("diversity needs at least two samples")
    clouds = [sample_surface(m, n_points, seed) for m in meshes if not m.is_empty]
    skipped = len(meshes) - len(clouds)
    if len(clouds) < 2:
        return math.nan, skipped
    vals = [chamfer(a, b) for a, b in itertools.combinations(clouds, 2)]
    return float(np.mean(vals)), skipped


def diversity_of_clouds(clouds: list[np.ndarray]) -> float:
    if len(clouds) < 2:
        raise ValueError("diversity needs at least two samples")
    return float(np.mean([chamfer(a, b) for a, b in itertools.combinations(clouds, 2)]))


@dataclass
class MetricReport:
    """Per-sketch metrics plus corpus means; CD values in squared units."""

    rows: list[dict] = field(default_factory=list)
    convention: str = CD_CONVENTION

    COLUMNS = ("F_shape_ae", "F_shape_mean", "F_avg_shape", "F_sketch_ae", "F_avg_sketch", "F_avg_sketch_std", "D_gnrtns")

    def add(self, sketch_id: str, **metrics: float) -> None:
        self.rows.append({"sketch": sketch_id, **metrics})

    def means(self) -> dict[str, float]:
        out = {}
        for c in self.COLUMNS:
            vals = [r[c] for r in self.rows if c in r and np.isfinite(r[c])]
            out[c] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_dict(self) -> dict:
        return {"cd_convention": self.convention, "rows": self.rows, "means": self.means()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        cols = ("sketch",) + self.COLUMNS
        rows = [[r["sketch"]] + [f"{r.get(c, math.nan):.5f}" for c in self.COLUMNS] for r in self.rows]
        m = self.means()
        rows.append(["mean"] + [f"{m[c]:.5f}" for c in self.COLUMNS])
        widths = [max(len(cols[i]), *(len(r[i]) for r in rows)) for i in range(len(cols))]
        line = lambda r: "  ".join(str(v).rjust(w) for v, w in zip(r, widths))
        return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in rows])
