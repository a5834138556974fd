"""Synthetic paired corpus: parametric chairs with analytic SDFs and stroke sketches.

Shapes are unions of boxes and capped cylinders, normalised so the bounding
box is centred at the origin with largest side 1.  Sketch strokes are part
feature curves (box edges, cylinder rims) clipped to the portions that lie on
the union surface, so an unperturbed sketch sits exactly on the zero level set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Box, CappedCylinder, TriangleMesh, Union, from_dict, marching_cubes, sample_grid, write_obj
from .geometry.grid import DEFAULT_BOUNDS, grid_points
from .rng import derive_seed
from .sampling import generate_sdf_samples, make_point_cloud, save_cloud, save_samples

DEFAULT_RANGES = {
    "seat_width": (0.45, 0.8),
    "seat_depth": (0.45, 0.75),
    "seat_thickness": (0.04, 0.09),
    "seat_height": (0.3, 0.5),
    "leg_radius": (0.02, 0.045),
    "leg_inset": (0.02, 0.08),
    "back_height": (0.3, 0.65),
    "back_thickness": (0.03, 0.07),
    "slatted_prob": 0.5,
    "slats": (2, 5),
    "armrest_prob": 0.35,
}


class CorpusError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# shapes


@dataclass
class ShapeSpec:
    params: dict
    sdf: Union
    mesh: TriangleMesh | None = None

    def to_json(self) -> str:
        return json.dumps({"params": self.params, "sdf": self.sdf.to_dict()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ShapeSpec":
        d = json.loads(text)
        return cls(d["params"], from_dict(d["sdf"]))

    def surface_centroid(self) -> np.ndarray:
        """Area-weighted centroid of the surface mesh."""
        mesh = self.ensure_mesh()
        a, b, c = mesh.corners()
        w = mesh.triangle_areas()
        return ((a + b + c) / 3.0 * w[:, None]).sum(axis=0) / w.sum()

    def ensure_mesh(self, resolution: int = 64) -> TriangleMesh:
        if self.mesh is None:
            self.mesh = marching_cubes(sample_grid(self.sdf, resolution, DEFAULT_BOUNDS))
        return self.mesh


def _u(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def _chair_parts(rng: np.random.Generator, ranges: dict) -> tuple[dict, list]:
    w, d = _u(rng, ranges["seat_width"]), _u(rng, ranges["seat_depth"])
    t, hs = _u(rng, ranges["seat_thickness"]), _u(rng, ranges["seat_height"])
    r, inset = _u(rng, ranges["leg_radius"]), _u(rng, ranges["leg_inset"])
    hb, tb = _u(rng, ranges["back_height"]), _u(rng, ranges["back_thickness"])
    slatted = bool(rng.random() < ranges["slatted_prob"])
    n_slats = int(rng.integers(ranges["slats"][0], ranges["slats"][1] + 1)) if slatted else 0
    arms = bool(rng.random() < ranges["armrest_prob"])

    seat_y = hs + t / 2
    parts: list = [Box((0.0, seat_y, 0.0), (w / 2, t / 2, d / 2))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            x = sx * (w / 2 - inset - r)
            z = sz * (d / 2 - inset - r)
            # legs reach the seat's mid-plane so their top rims are buried
            parts.append(CappedCylinder((x, 0.0, z), (x, seat_y, z), r))
    back_z = -d / 2 + tb / 2
    top = hs + t + hb
    if slatted:
        rail_h = max(0.04, 0.15 * hb)
        parts.append(Box((0.0, top - rail_h / 2, back_z), (w / 2, rail_h / 2, tb / 2)))
        slat_w = min(0.06, 0.6 * w / (2 * n_slats))
        for x in np.linspace(-w / 2 + slat_w / 2, w / 2 - slat_w / 2, n_slats):
            lo, hi = seat_y, top - rail_h / 2
            parts.append(Box((float(x), (lo + hi) / 2, back_z), (slat_w / 2, (hi - lo) / 2, tb / 2 * 0.8)))
    else:
        parts.append(Box((0.0, (seat_y + top) / 2, back_z), (w / 2, (top - seat_y) / 2, tb / 2)))
    if arms:
        arm_h = 0.2 * hb + 0.05
        arm_w = 0.05
        for sx in (-1, 1):
            x = sx * (w / 2 - arm_w / 2)
            y = hs + t + arm_h
            parts.append(Box((x, y, 0.0), (arm_w / 2, 0.02, d / 2 - 0.01)))
            parts.append(Box((x, (seat_y + y) / 2, d / 2 - 0.04), (arm_w / 2 * 0.8, (y - seat_y) / 2, 0.02)))
    params = {
        "seat_width": w, "seat_depth": d, "seat_thickness": t, "seat_height": hs,
        "leg_radius": r, "leg_inset": inset, "back_height": hb, "back_thickness": tb,
        "backrest": "slatted" if slatted else "solid", "slats": n_slats, "armrests": arms,
    }
    return params, parts


def _normalise(parts: list) -> list:
    lo, hi = Union(tuple(parts)).bounds()
    mid = (lo + hi) / 2
    s = 1.0 / float(np.max(hi - lo))
    out = []
    for p in parts:
        if isinstance(p, Box):
            out.append(Box(tuple((np.asarray(p.center) - mid) * s), tuple(np.asarray(p.half_extents) * s)))
        else:
            out.append(CappedCylinder(tuple((np.asarray(p.a) - mid) * s), tuple((np.asarray(p.b) - mid) * s), p.radius * s))
    return out


def is_connected(sdf, resolution: int = 64) -> bool:
    pts, _, _ = grid_points(resolution, DEFAULT_BOUNDS)
    occ = (sdf(pts) <= 0).reshape((resolution,) * 3)
    _, n = ndimage.label(occ)
    return n == 1


def generate_shape(rng_seed: int, ranges: dict | None = None, max_tries: int = 100) -> ShapeSpec:
    """Deterministic chair for ``rng_seed``; rejection-samples until connected."""
    ranges = DEFAULT_RANGES | (ranges or {})
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_tries):
        params, parts = _chair_parts(rng, ranges)
        sdf = Union(tuple(_normalise(parts)))
        if is_connected(sdf):
            params["seed"] = int(rng_seed)
            return ShapeSpec(params, sdf)
    raise CorpusError(f"no connected shape after {max_tries} tries (seed {rng_seed})")


# ----------------------------------------------------------------------------
# sketches


@dataclass
class SketchSpec:
    strokes: list[np.ndarray]
    abstraction: float = 1.0
    jitter_std: float = 0.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def points(self) -> np.ndarray:
        return np.concatenate(self.strokes, axis=0)

    def centroid(self) -> np.ndarray:
        """Arc-length weighted centroid of the strokes."""
        mids, lens = [], []
        for s in self.strokes:
            seg = np.linalg.norm(np.diff(s, axis=0), axis=1)
            mids.append((s[:-1] + s[1:]) / 2)
            lens.append(seg)
        mids, lens = np.concatenate(mids), np.concatenate(lens)
        if lens.sum() <= 0:
            return self.points().mean(axis=0)
        return (mids * lens[:, None]).sum(axis=0) / lens.sum()

    def to_json(self) -> str:
        return json.dumps(
            {
                "strokes": [s.tolist() for s in self.strokes],
                "abstraction": self.abstraction,
                "jitter_std": self.jitter_std,
                "offset": np.asarray(self.offset).tolist(),
                "scale": self.scale,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SketchSpec":
        d = json.loads(text)
        return cls([np.asarray(s, dtype=np.float64) for s in d["strokes"]], d["abstraction"], d["jitter_std"],
                   np.asarray(d["offset"]), d["scale"])


_BOX_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]


def _resample(a: np.ndarray, b: np.ndarray, spacing: float) -> np.ndarray:
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return a + t * (b - a)


def feature_curves(shape: ShapeSpec, spacing: float = 0.005, rim_segments: int = 64) -> list[np.ndarray]:
    """Part boundary curves restricted to the union surface, as polylines."""
    parts = shape.sdf.parts
    strokes = []
    for i, part in enumerate(parts):
        if isinstance(part, Box):
            c = part.corners()
            curves = [_resample(c[a], c[b], spacing) for a, b in _BOX_EDGES]
        else:
            curves = [part.rim("a", rim_segments), part.rim("b", rim_segments)]
        others = [p for j, p in enumerate(parts) if j != i]
        for curve in curves:
            outside = np.ones(len(curve), dtype=bool)
            for o in others:
                outside &= o(curve) > 1e-9
            # split into runs of consecutive points that lie on the union surface
            edges = np.flatnonzero(np.diff(np.concatenate([[0], outside.astype(np.int8), [0]])))
            for lo, hi in zip(edges[::2], edges[1::2]):
                if hi - lo >= 2:
                    strokes.append(curve[lo:hi].copy())
    return strokes


def generate_sketch(
    shape: ShapeSpec,
    abstraction: float = 1.0,
    jitter_std: float = 0.0,
    misalign: tuple[float, float] = (0.0, 0.0),
    rng_seed=0,
) -> SketchSpec:
    """Keep a seeded fraction of feature curves, jitter points, then apply one
    global offset and scale (about the stroke centroid)."""
    if not 0.0 < abstraction <= 1.0:
        raise ValueError("abstraction must be in (0, 1]")
    if jitter_std < 0 or min(misalign) < 0:
        raise ValueError("noise levels must be non-negative")
    rng = np.random.default_rng(rng_seed)
    curves = feature_curves(shape)
    n_keep = int(round(abstraction * len(curves)))
    if n_keep < 3:
        raise CorpusError(f"abstraction {abstraction} leaves {n_keep} strokes (< 3)")
    keep = np.sort(rng.choice(len(curves), n_keep, replace=False))
    strokes = [curves[i] for i in keep]
    if jitter_std > 0:
        strokes = [s + rng.normal(0.0, jitter_std, s.shape) for s in strokes]
    offset = rng.normal(0.0, misalign[0], 3) if misalign[0] > 0 else np.zeros(3)
    scale = float(1.0 + rng.normal(0.0, misalign[1])) if misalign[1] > 0 else 1.0
    sketch = SketchSpec(strokes, abstraction, jitter_std, offset, scale)
    if misalign[0] > 0 or misalign[1] > 0:
        c = sketch.centroid()
        sketch.strokes = [(s - c) * scale + c + offset for s in strokes]
    return sketch


def align_sketch(sketch: SketchSpec, shape: ShapeSpec) -> SketchSpec:
    """Scale the sketch so its bounding box's largest side is 1, then move its
    centroid onto the shape's surface centroid."""
    pts = sketch.points()
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if len(pts) < 2 or extent <= 0:
        raise CorpusError("degenerate sketch")
    c = sketch.centroid()
    s = 1.0 / extent
    strokes = [(st - c) * s for st in sketch.strokes]
    out = SketchSpec(strokes, sketch.abstraction, sketch.jitter_std, sketch.offset, sketch.scale)
    shift = shape.surface_centroid() - out.centroid()
    out.strokes = [st + shift for st in strokes]
    return out


# ----------------------------------------------------------------------------
# dataset


@dataclass
class SketchParams:
    abstraction: float = 0.7
    jitter_std: float = 0.01
    offset_std: float = 0.03
    scale_std: float = 0.05


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_dataset(
    out_dir: str | Path,
    n_pairs: int = 40,
    n_unpaired: int = 80,
    split: tuple[float, float] = (0.75, 0.25),
    seed: int = 0,
    sketch: SketchParams | None = None,
    n_surface: int = 4000,
    n_uniform: int = 400,
    sigmas: tuple[float, float] = (0.012, 0.035),
    sigma_is_variance: bool = True,
    n_raw: int = 15000,
    n_points: int = 1024,
    log=None,
) -> dict:
    """Write shapes, sketches, SDF samples and ``manifest.json`` under ``out_dir``."""
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    sketch = sketch or SketchParams()
    out = Path(out_dir)
    try:
        (out / "shapes").mkdir(parents=True, exist_ok=True)
        (out / "sketches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot write to {out}: {exc}") from exc

    n_train = int(round(split[0] * n_pairs))
    entries = []
    for i in range(n_pairs + n_unpaired):
        sid = f"shape_{i:04d}"
        paired = i < n_pairs
        shape_seed = derive_seed(seed, "corpus", "shape", i)
        shape = generate_shape(shape_seed)
        mesh = shape.ensure_mesh()
        base = out / "shapes" / sid
        base.with_suffix(".json").write_text(shape.to_json())
        write_obj(mesh, base.with_suffix(".obj"))
        cloud = make_point_cloud(mesh, n_raw, n_points, derive_seed(seed, "corpus", "cloud", i))
        save_cloud(cloud, f"{base}.cloud.sfp")
        samples = generate_sdf_samples(
            shape.sdf, n_surface, n_uniform, sigmas, derive_seed(seed, "corpus", "samples", i),
            sigma_is_variance=sigma_is_variance, mesh=mesh, shape_id=sid,
        )
        save_samples(samples, f"{base}.samples.sfs")
        entry = {
            "id": sid,
            "split": ("train" if i < n_train else "test") if paired else "unpaired",
            "seed": shape_seed,
            "shape_json": f"shapes/{sid}.json",
            "mesh": f"shapes/{sid}.obj",
            "cloud": f"shapes/{sid}.cloud.sfp",
            "samples": f"shapes/{sid}.samples.sfs",
        }
        if paired:
            sk_seed = derive_seed(seed, "corpus", "sketch", i)
            sk = generate_sketch(shape, sketch.abstraction, sketch.jitter_std, (sketch.offset_std, sketch.scale_std), sk_seed)
            sk = align_sketch(sk, shape)
            sk_base = out / "sketches" / sid
            Path(f"{sk_base}.strokes.json").write_text(sk.to_json())
            sk_cloud = make_point_cloud(sk.strokes, n_raw, n_points, derive_seed(seed, "corpus", "sketch_cloud", i))
            save_cloud(sk_cloud, f"{sk_base}.sfp")
            entry |= {"sketch_seed": sk_seed, "sketch": f"sketches/{sid}.sfp", "strokes": f"sketches/{sid}.strokes.json"}
        entries.append(entry)
        if log:
            log({"event": "corpus", "shape": sid, "split": entry["split"]})

    manifest = {
        "version": 1,
        "seed": seed,
        "params": {
            "n_pairs": n_pairs, "n_unpaired": n_unpaired, "split": list(split),
            "sketch": sketch.__dict__, "n_surface": n_surface, "n_uniform": n_uniform,
            "sigmas": list(sigmas), "sigma_is_variance": sigma_is_variance,
            "n_raw": n_raw, "n_points": n_points,
        },
        "entries": entries,
    }
    for e in entries:
        e["sha256"] = {k: _sha(out / e[k]) for k in ("shape_json", "mesh", "cloud", "samples", "sketch", "strokes") if k in e}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(text)
    manifest["hash"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest


def import_vr_sketch_dataset(root: str | Path):
    """Placeholder for reading the public VR chair-sketch dataset.

    Expected layout: ``<root>/pointcloud/<id>.npy`` (15k stroke points per
    sketch), ``<root>/shapes/<id>.obj`` reference meshes normalised as in
    ShapeNetCore-v2, and ``<root>/list/{train,test}.txt`` split lists.
    Converting it into this package's manifest format is not implemented.
    """
    raise NotImplementedError("VR sketch dataset conversion is out of scope; see docstring for the expected layout")
