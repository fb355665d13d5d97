"""Spectral correspondence and deformation analysis for surface-scan
collections: intrinsic (functional-map) variability and extrinsic
(displacement / volume) treatment monitoring.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .mesh import (
    TriMesh,
    clean_mesh,
    cotangent_laplacian,
    signed_volume,
    subdivide_midpoint,
    submesh,
)
from .meshio import load_mesh, save_mesh
from .proximity import SurfaceLocator, nearest_rows

__all__ = [
    "BACKEND",
    "TriMesh",
    "clean_mesh",
    "cotangent_laplacian",
    "signed_volume",
    "subdivide_midpoint",
    "submesh",
    "load_mesh",
    "save_mesh",
    "SurfaceLocator",
    "nearest_rows",
    "__version__",
]
