"""Analytic signed distance primitives.

Sign convention everywhere: negative inside, positive outside.  A
:class:`Union` evaluates to the pointwise minimum of its children, which is
the exact distance outside the parts but only a lower bound on the (negative)
distance in regions where parts overlap.  The zero level set is exact either
way, and that is what meshing and sketch losses consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union as _U

import numpy as np


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[-1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {p.shape}")
    return p


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __call__(self, points) -> np.ndarray:
        p = _as_points(points)
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def __call__(self, points) -> np.ndarray:
        p = _as_points(points)
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h

    def corners(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return c + signs * h

    def to_dict(self) -> dict:
        return {"type": "box", "center": list(self.center), "half_extents": list(self.half_extents)}


@dataclass(frozen=True)
class CappedCylinder:
    """Solid cylinder with flat caps between two axis endpoints."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def _frame(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        axis = b - a
        length = float(np.linalg.norm(axis))
        if length == 0.0:
            raise ValueError("capped cylinder with coincident endpoints")
        return a, axis / length, length

    def __call__(self, points) -> np.ndarray:
        p = _as_points(points)
        a, u, length = self._frame()
        pa = p - a
        t = pa @ u
        radial = np.linalg.norm(pa - t[:, None] * u, axis=-1) - self.radius
        axial = np.abs(t - 0.5 * length) - 0.5 * length
        outside = np.hypot(np.maximum(radial, 0.0), np.maximum(axial, 0.0))
        inside = np.minimum(np.maximum(radial, axial), 0.0)
        return outside + inside

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        a, u, _ = self._frame()
        b = np.asarray(self.b, dtype=np.float64)
        # disc extent along each world axis is r * sqrt(1 - u_i^2)
        ext = self.radius * np.sqrt(np.clip(1.0 - u * u, 0.0, None))
        return np.minimum(a, b) - ext, np.maximum(a, b) + ext

    def rim(self, which: str, segments: int = 64) -> np.ndarray:
        """Closed polyline on the rim circle at endpoint ``which`` ('a' or 'b')."""
        a, u, _ = self._frame()
        c = a if which == "a" else np.asarray(self.b, dtype=np.float64)
        helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(u, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        ang = np.linspace(0.0, 2 * np.pi, segments + 1)
        return c + self.radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)

    def to_dict(self) -> dict:
        return {"type": "capped_cylinder", "a": list(self.a), "b": list(self.b), "radius": self.radius}


Primitive = _U[Sphere, Box, CappedCylinder]


@dataclass(frozen=True)
class Union:
    parts: tuple = field(default_factory=tuple)

    def __call__(self, points) -> np.ndarray:
        p = _as_points(points)
        if not self.parts:
            return np.full(len(p), np.inf)
        out = self.parts[0](p)
        for part in self.parts[1:]:
            out = np.minimum(out, part(p))
        return out

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    def to_dict(self) -> dict:
        return {"type": "union", "parts": [p.to_dict() for p in self.parts]}


AnalyticSdf = _U[Primitive, Union]


def union(*parts) -> Union:
    flat = []
    for p in parts:
        flat.extend(p.parts if isinstance(p, Union) else [p])
    return Union(tuple(flat))


def eval_analytic_sdf(sdf, points) -> np.ndarray:
    """Signed distance of every point; one scalar per point."""
    return sdf(points)


def from_dict(d: dict):
    kind = d["type"]
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half_extents"]))
    if kind == "capped_cylinder":
        return CappedCylinder(tuple(d["a"]), tuple(d["b"]), float(d["radius"]))
    if kind == "union":
        return Union(tuple(from_dict(p) for p in d["parts"]))
    raise ValueError(f"unknown sdf node type '{kind}'")
