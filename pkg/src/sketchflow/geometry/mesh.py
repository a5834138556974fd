from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EmptySurfaceError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.vertices[self.triangles]
        return t[:, 0], t[:, 1], t[:, 2]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def validate(self) -> None:
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")
        if len(self.triangles) and self.triangle_areas().min() <= 1e-12:
            raise ValueError("degenerate triangle")

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def compact(self, min_area: float = 1e-12) -> "TriangleMesh":
        """Drop triangles with area <= ``min_area`` and unreferenced vertices."""
        tris = self.triangles[self.triangle_areas() > min_area] if len(self.triangles) else self.triangles
        used, inverse = np.unique(tris.reshape(-1), return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))


# ----------------------------------------------------------------------------
# construction helpers


def box_mesh(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5)) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * h + c
    # vertex index = 4*ix + 2*iy + iz; faces wound outward
    f = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriangleMesh(v, np.array(f))


def icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    v = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return TriangleMesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


# ----------------------------------------------------------------------------
# sampling


def sample_surface(mesh: TriangleMesh, n: int, rng_seed=0, return_index: bool = False):
    """``n`` points uniformly on the surface (triangles weighted by area)."""
    if mesh.is_empty:
        raise EmptySurfaceError("no surface")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptySurfaceError("no surface")
    cdf = np.cumsum(areas) / total
    tri = np.searchsorted(cdf, rng.random(n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[tri] for x in mesh.corners())
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return (pts, tri) if return_index else pts


# ----------------------------------------------------------------------------
# distance queries


def _closest_point_sq_dist(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared distance from points (P,1,3) to triangles (1,F,3); Ericson's region test."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = np.broadcast_shapes(d1.shape, va.shape)
    v = np.zeros(shape)
    w = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, vv, ww):
        nonlocal done
        m = mask & ~done
        v[m] = np.broadcast_to(vv, shape)[m]
        w[m] = np.broadcast_to(ww, shape)[m]
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 0.0, 0.0)  # vertex a
        assign((d3 >= 0) & (d4 <= d3), 1.0, 0.0)  # vertex b
        assign((d6 >= 0) & (d5 <= d6), 0.0, 1.0)  # vertex c
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), d1 / (d1 - d3), 0.0)  # edge ab
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 0.0, d2 / (d2 - d6))  # edge ac
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 1.0 - t_bc, t_bc)  # edge bc
        denom = 1.0 / (va + vb + vc)
        assign(np.ones(shape, dtype=bool), vb * denom, vc * denom)  # interior
    closest = a + v[..., None] * ab + w[..., None] * ac
    diff = p - closest
    return np.einsum("...k,...k->...", diff, diff)


def unsigned_distance(mesh: TriangleMesh, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = (x[None] for x in mesh.corners())
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk, None, :]
        out[s : s + chunk] = np.sqrt(_closest_point_sq_dist(p, a, b, c).min(axis=1))
    return out


_RAY_DIRS = np.array(
    [
        [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
        [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
        [0.8164965809277261, -0.4082482904638631, 0.4082482904638631],
    ]
)


def _crossings(mesh: TriangleMesh, points: np.ndarray, direction: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Number of triangles hit by the ray ``p + t*direction, t > 0`` (Moller-Trumbore)."""
    a, b, c = mesh.corners()
    e1, e2 = b - a, c - a
    h = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        sv = p - a[None]
        u = np.einsum("pfk,fk->pf", sv, h) * inv
        q_cross = np.cross(sv, e1[None])
        v = np.einsum("pfk,k->pf", q_cross, direction) * inv
        t = np.einsum("fk,pfk->pf", e2, q_cross) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        counts[s : s + chunk] = hit.sum(axis=1)
    return counts


def mesh_sdf(mesh: TriangleMesh, points, return_flag: bool = False):
    """Signed distance to a closed triangle mesh.

    Magnitude is the exact point-to-triangle minimum.  Sign comes from ray
    crossing parity, majority vote over three fixed directions.  On an open
    mesh a warning is issued (and ``watertight=False`` returned when
    ``return_flag``) since the sign is then unreliable.
    """
    if mesh.is_empty:
        raise EmptySurfaceError("no surface")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    watertight = mesh.is_watertight()
    if not watertight:
        warnings.warn("mesh_sdf on a non-watertight mesh; signs may be unreliable", RuntimeWarning, stacklevel=2)
    dist = unsigned_distance(mesh, pts)
    votes = sum((_crossings(mesh, pts, d) % 2 == 1).astype(int) for d in _RAY_DIRS)
    sign = np.where(votes >= 2, -1.0, 1.0)
    values = sign * dist
    return (values, watertight) if return_flag else values


# ----------------------------------------------------------------------------
# OBJ


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
