"""Closest-point query backends.

The compiled Cython kernel is used when the extension built; otherwise a
pure-NumPy implementation with identical semantics takes over.  Both are
exact.  ``SURFMAP_BACKEND=numpy`` forces the fallback.
"""

import os

import numpy as np

from ._bvh import build_flat_bvh

try:
    from ._closest_point import Tree as _CompiledTree
except ImportError:
    _CompiledTree = None

from ._fallback import Tree as _FallbackTree

if _CompiledTree is not None and os.environ.get("SURFMAP_BACKEND") != "numpy":
    BACKEND = "compiled"
else:
    BACKEND = "numpy"


def make_tree(vertices, faces, backend=None):
    """Build a closest-point search structure.

    The returned object answers ``query(points) -> (foot, face, dist)``
    with the exact closest surface point, its face index and the
    Euclidean distance, one row per query point.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    chosen = backend or BACKEND
    if chosen == "compiled":
        if _CompiledTree is None:
            raise RuntimeError("compiled kernels are not available")
        flat = build_flat_bvh(vertices, faces)
        tri_ordered = vertices[faces[flat["order"]]]
        return _CompiledTree(
            tri_ordered, flat["lo"], flat["hi"], flat["left"], flat["right"],
            flat["start"], flat["count"], flat["order"],
        )
    if chosen == "numpy":
        return _FallbackTree(vertices, faces)
    raise ValueError(f"unknown backend {chosen!r}")
