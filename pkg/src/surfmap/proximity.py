"""Nearest-point queries: exact closest point on a surface, and
nearest-row lookups in embedding spaces.
"""

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import BACKEND, make_tree
from .errors import ContractError, ShapeError


class SurfaceLocator:
    """Exact closest-point queries against a triangle mesh."""

    def __init__(self, mesh, backend=None):
        if mesh.n_faces == 0:
            raise ContractError("SurfaceLocator needs a mesh with faces")
        self.mesh = mesh
        self._tree = make_tree(mesh.vertices, mesh.faces, backend=backend)

    def query(self, points):
        """Closest surface points.

        Returns ``(foot, face, dist)``: the closest point on the surface,
        the index of a face containing it, and the distance, one row per
        query point.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"query points must be (n, 3), got {points.shape}")
        return self._tree.query(points)


def nearest_rows(reference, queries, max_distance=None):
    """Index of the nearest row of ``reference`` for each row of ``queries``.

    Exact ties resolve to the lowest index.  With ``max_distance`` set,
    matches farther than it come back as -1.

    Returns ``(index, distance)``.
    """
    reference = np.ascontiguousarray(reference, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if reference.ndim != 2 or queries.ndim != 2:
        raise ShapeError("nearest_rows expects 2-D arrays")
    if reference.shape[1] != queries.shape[1]:
        raise ShapeError(
            f"dimension mismatch: {reference.shape[1]} vs {queries.shape[1]}"
        )
    if len(reference) == 0:
        raise ContractError("nearest_rows: empty reference set")
    tree = cKDTree(reference)
    k = min(2, len(reference))
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    best_d = dist[:, 0].copy()
    best_i = idx[:, 0].copy()
    if k == 2:
        # canonicalize exact (or numerically indistinct) ties: lowest index
        tied = dist[:, 1] <= best_d * (1 + 1e-12)
        for q in np.flatnonzero(tied):
            r = best_d[q] * (1 + 1e-12)
            cand = tree.query_ball_point(queries[q], r + 1e-300)
            best_i[q] = min(cand)
    if max_distance is not None:
        best_i = np.where(best_d <= max_distance, best_i, -1)
    return best_i.astype(np.int64), best_d
