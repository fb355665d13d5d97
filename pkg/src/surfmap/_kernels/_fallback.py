"""Pure-NumPy closest-point-on-surface backend.

Exact: candidate triangles are collected with a KD-tree bound (distance
to the nearest mesh vertex caps the true distance, so any triangle whose
centroid lies farther than that bound plus the largest centroid-to-corner
radius cannot win), then the true minimizer is taken over the candidates.
"""

import numpy as np
from scipy.spatial import cKDTree

_CHUNK = 4096


def closest_point_on_triangles(p, a, b, c):
    """Vectorized closest point on triangle (one triangle per row)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(cond, value):
        nonlocal done
        sel = cond & ~done
        if sel.any():
            out[sel] = value[sel] if value.ndim == 2 else value
            done = done | sel

    def safe_div(num, den):
        return np.where(den != 0, num, 0.0) / np.where(den != 0, den, 1.0)

    settle((d1 <= 0) & (d2 <= 0), a)                      # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)                     # vertex b
    settle((d6 >= 0) & (d5 <= d6), c)                     # vertex c
    v = safe_div(d1, d1 - d3)[:, None]
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v * ab)  # edge ab
    w = safe_div(d2, d2 - d6)[:, None]
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w * ac)  # edge ac
    w = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))[:, None]
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w * (c - b))
    denom = va + vb + vc                                   # interior
    v = safe_div(vb, denom)[:, None]
    w = safe_div(vc, denom)[:, None]
    settle(np.ones(len(p), dtype=bool), a + v * ab + w * ac)
    return out


class Tree:
    def __init__(self, vertices, faces):
        self.tri = np.ascontiguousarray(vertices[faces])
        cent = self.tri.mean(axis=1)
        self.radius = float(
            np.linalg.norm(self.tri - cent[:, None, :], axis=2).max()
        )
        self._cent_kd = cKDTree(cent)
        self._vert_kd = cKDTree(vertices)

    def query(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        n = len(points)
        foot = np.empty((n, 3))
        face = np.empty(n, dtype=np.int64)
        dist = np.empty(n)
        for s in range(0, n, _CHUNK):
            block = points[s:s + _CHUNK]
            f, fc, d = self._query_block(block)
            foot[s:s + _CHUNK] = f
            face[s:s + _CHUNK] = fc
            dist[s:s + _CHUNK] = d
        return foot, face, dist

    def _query_block(self, points):
        d_ub, _ = self._vert_kd.query(points)
        bound = d_ub + self.radius + 1e-9 * (1.0 + d_ub)
        lists = self._cent_kd.query_ball_point(points, bound)
        lens = np.fromiter((len(l) for l in lists), dtype=np.int64,
                           count=len(lists))
        # the triangle owning the nearest vertex is always in range
        assert lens.min() > 0
        flat_tri = np.concatenate(lists).astype(np.int64)
        flat_pt = np.repeat(np.arange(len(points)), lens)
        tri = self.tri[flat_tri]
        cp = closest_point_on_triangles(
            points[flat_pt], tri[:, 0], tri[:, 1], tri[:, 2]
        )
        d2 = np.einsum("ij,ij->i", cp - points[flat_pt], cp - points[flat_pt])
        offs = np.concatenate([[0], np.cumsum(lens)[:-1]])
        seg_min = np.minimum.reduceat(d2, offs)
        pos = np.arange(len(d2))
        cand = np.where(d2 <= seg_min[flat_pt], pos, len(d2))
        best = np.minimum.reduceat(cand, offs)
        return cp[best], flat_tri[best], np.sqrt(d2[best])
