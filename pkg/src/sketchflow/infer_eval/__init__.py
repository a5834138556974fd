"""Generation from sketches and the evaluation metrics."""

from .inference import (
    GenerationResult,
    code_from_z,
    decode_mesh,
    generate,
    interpolate,
    noise,
    sketch_code,
)
from .metrics import (
    CD_CONVENTION,
    MetricReport,
    chamfer,
    chamfer_brute,
    diversity,
    diversity_of_clouds,
    fidelity_shape,
    fidelity_sketch,
)

__all__ = [
    "CD_CONVENTION",
    "GenerationResult",
    "MetricReport",
    "chamfer",
    "chamfer_brute",
    "code_from_z",
    "decode_mesh",
    "diversity",
    "diversity_of_clouds",
    "fidelity_shape",
    "fidelity_sketch",
    "generate",
    "interpolate",
    "noise",
    "sketch_code",
]
