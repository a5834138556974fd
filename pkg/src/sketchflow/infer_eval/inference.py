"""Conditional generation, mean-embedding decoding and latent interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..geometry import DEFAULT_BOUNDS, TriangleMesh, marching_cubes, sample_grid
from ..models import ConditionalFlow, Decoder, Encoder, PreparedCloud
from ..rng import substream

MODES = ("ae", "mean", "sample", "interp")


@dataclass
class GenerationResult:
    sketch_id: str
    mode: str
    code: np.ndarray
    mesh: TriangleMesh
    noise_seed: int | None = None
    z: np.ndarray | None = None
    t: float | None = None
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown generation mode '{self.mode}'")
        if not np.all(np.isfinite(self.code)):
            raise ValueError("generated code is not finite")

    @property
    def empty(self) -> bool:
        """Flag for an empty isosurface (the decoder never crossed zero on the grid)."""
        return self.mesh.is_empty


def decode_mesh(decoder: Decoder, code: np.ndarray, resolution: int = 64, bounds=DEFAULT_BOUNDS) -> TriangleMesh:
    grid = sample_grid(lambda p: decoder.predict(code, p), resolution, bounds)
    return marching_cubes(grid)


def code_from_z(flow: ConditionalFlow, z: np.ndarray, condition: np.ndarray) -> np.ndarray:
    """F^-1(z; c) for one noise vector.  Always evaluated as a single row so
    that every caller gets bitwise identical codes for identical inputs."""
    with ad.no_grad():
        z = np.asarray(z, dtype=flow.dtype).reshape(1, -1)
        c = np.asarray(condition, dtype=flow.dtype).reshape(1, -1)
        return flow.inverse(z, c).data[0].copy()


def sketch_code(encoder: Encoder, sketch: np.ndarray | PreparedCloud) -> np.ndarray:
    with ad.no_grad():
        return encoder(sketch).data.copy()


def noise(seed: int, sketch_id: str, k: int, dim: int) -> np.ndarray:
    return substream(seed, "inference", sketch_id, "sample", k).standard_normal(dim)


def generate(
    decoder: Decoder,
    encoder: Encoder,
    flow: ConditionalFlow,
    sketch: np.ndarray | PreparedCloud,
    n_samples: int = 5,
    grid_res: int = 64,
    seed: int = 0,
    sketch_id: str = "sketch",
    bounds=DEFAULT_BOUNDS,
) -> list[GenerationResult]:
    """Deterministic result from e'_g, the mean result (z = 0), then ``n_samples`` draws."""
    cond = sketch_code(encoder, sketch)
    dim = len(cond)
    out = [GenerationResult(sketch_id, "ae", cond, decode_mesh(decoder, cond, grid_res, bounds))]
    zero = np.zeros(dim)
    mean_code = code_from_z(flow, zero, cond)
    out.append(GenerationResult(sketch_id, "mean", mean_code, decode_mesh(decoder, mean_code, grid_res, bounds), z=zero))
    for k in range(n_samples):
        z = noise(seed, sketch_id, k, dim)
        code = code_from_z(flow, z, cond)
        out.append(GenerationResult(sketch_id, "sample", code, decode_mesh(decoder, code, grid_res, bounds), noise_seed=k, z=z))
    return out


def interpolate(
    flow: ConditionalFlow,
    decoder: Decoder,
    condition: np.ndarray,
    z_a: np.ndarray,
    z_b: np.ndarray,
    n_steps: int = 3,
    grid_res: int = 64,
    sketch_id: str = "sketch",
    bounds=DEFAULT_BOUNDS,
) -> list[GenerationResult]:
    """Linear interpolation in z at ``n_steps + 2`` evenly spaced points, endpoints included."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape or z_a.shape != (flow.config.latent_dim,):
        raise ValueError("z_a and z_b must both have the flow's latent dimension")
    out = []
    for t in np.linspace(0.0, 1.0, n_steps + 2):
        z = (1.0 - t) * z_a + t * z_b
        code = code_from_z(flow, z, condition)
        out.append(GenerationResult(sketch_id, "interp", code, decode_mesh(decoder, code, grid_res, bounds), z=z, t=float(t)))
    return out
