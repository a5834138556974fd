from .grid import DEFAULT_BOUNDS, Grid3, dump_grid, grid_points, load_grid, marching_cubes, sample_grid
from .mesh import (
    EmptySurfaceError,
    TriangleMesh,
    box_mesh,
    icosphere,
    mesh_sdf,
    read_obj,
    sample_surface,
    unsigned_distance,
    write_obj,
)
from .sdf import Box, CappedCylinder, Sphere, Union, eval_analytic_sdf, from_dict, union

__all__ = [
    "Box",
    "CappedCylinder",
    "DEFAULT_BOUNDS",
    "EmptySurfaceError",
    "Grid3",
    "Sphere",
    "TriangleMesh",
    "Union",
    "box_mesh",
    "dump_grid",
    "eval_analytic_sdf",
    "from_dict",
    "grid_points",
    "icosphere",
    "load_grid",
    "marching_cubes",
    "mesh_sdf",
    "read_obj",
    "sample_grid",
    "sample_surface",
    "union",
    "unsigned_distance",
    "write_obj",
]
