# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled closest-point-on-surface queries over a flat AABB tree."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, sqrt

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline double _box_d2(double px, double py, double pz,
                           const double* lo, const double* hi) nogil:
    cdef double d = 0.0, t
    t = lo[0] - px
    if t > 0:
        d += t * t
    t = px - hi[0]
    if t > 0:
        d += t * t
    t = lo[1] - py
    if t > 0:
        d += t * t
    t = py - hi[1]
    if t > 0:
        d += t * t
    t = lo[2] - pz
    if t > 0:
        d += t * t
    t = pz - hi[2]
    if t > 0:
        d += t * t
    return d


cdef inline double _tri_cp(double px, double py, double pz,
                           const double* a, const double* b, const double* c,
                           double* ox, double* oy, double* oz) nogil:
    """Closest point on one triangle; returns squared distance."""
    cdef double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2]
    cdef double acx = c[0] - a[0], acy = c[1] - a[1], acz = c[2] - a[2]
    cdef double apx = px - a[0], apy = py - a[1], apz = pz - a[2]
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double bpx, bpy, bpz, cpx, cpy, cpz
    cdef double d3, d4, d5, d6, va, vb, vc, v, w, denom
    cdef double qx, qy, qz, dx, dy, dz

    if d1 <= 0 and d2 <= 0:
        qx = a[0]; qy = a[1]; qz = a[2]
    else:
        bpx = px - b[0]; bpy = py - b[1]; bpz = pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0 and d4 <= d3:
            qx = b[0]; qy = b[1]; qz = b[2]
        else:
            cpx = px - c[0]; cpy = py - c[1]; cpz = pz - c[2]
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            if d6 >= 0 and d5 <= d6:
                qx = c[0]; qy = c[1]; qz = c[2]
            else:
                vc = d1 * d4 - d3 * d2
                if vc <= 0 and d1 >= 0 and d3 <= 0:
                    v = d1 / (d1 - d3)
                    qx = a[0] + v * abx; qy = a[1] + v * aby; qz = a[2] + v * abz
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0 and d2 >= 0 and d6 <= 0:
                        w = d2 / (d2 - d6)
                        qx = a[0] + w * acx; qy = a[1] + w * acy; qz = a[2] + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0 and d4 - d3 >= 0 and d5 - d6 >= 0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            qx = b[0] + w * (c[0] - b[0])
                            qy = b[1] + w * (c[1] - b[1])
                            qz = b[2] + w * (c[2] - b[2])
                        else:
                            denom = va + vb + vc
                            if denom != 0:
                                v = vb / denom
                                w = vc / denom
                            else:
                                v = 0.0
                                w = 0.0
                            qx = a[0] + v * abx + w * acx
                            qy = a[1] + v * aby + w * acy
                            qz = a[2] + v * abz + w * acz

    dx = px - qx; dy = py - qy; dz = pz - qz
    ox[0] = qx; oy[0] = qy; oz[0] = qz
    return dx * dx + dy * dy + dz * dz


cdef class Tree:
    """Traversal state over flat BVH arrays built in Python."""

    cdef double[:, :, ::1] tri      # ordered triangles (m, 3, 3)
    cdef double[:, ::1] lo
    cdef double[:, ::1] hi
    cdef i64[::1] left
    cdef i64[::1] right
    cdef i64[::1] start
    cdef i64[::1] count
    cdef i64[::1] order

    def __init__(self, tri_ordered, lo, hi, left, right, start, count, order):
        self.tri = np.ascontiguousarray(tri_ordered, dtype=np.float64)
        self.lo = np.ascontiguousarray(lo, dtype=np.float64)
        self.hi = np.ascontiguousarray(hi, dtype=np.float64)
        self.left = np.ascontiguousarray(left, dtype=np.int64)
        self.right = np.ascontiguousarray(right, dtype=np.int64)
        self.start = np.ascontiguousarray(start, dtype=np.int64)
        self.count = np.ascontiguousarray(count, dtype=np.int64)
        self.order = np.ascontiguousarray(order, dtype=np.int64)

    def query(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        cdef const double[:, ::1] pts = points
        cdef Py_ssize_t n = pts.shape[0]
        foot_arr = np.empty((n, 3), dtype=np.float64)
        face_arr = np.empty(n, dtype=np.int64)
        dist_arr = np.empty(n, dtype=np.float64)
        cdef double[:, ::1] foot = foot_arr
        cdef i64[::1] face = face_arr
        cdef double[::1] dist = dist_arr
        cdef Py_ssize_t i
        with nogil:
            for i in range(n):
                self._one(pts[i, 0], pts[i, 1], pts[i, 2],
                          &foot[i, 0], &face[i], &dist[i])
        return foot_arr, face_arr, dist_arr

    cdef void _one(self, double px, double py, double pz,
                   double* foot, i64* face, double* dist) nogil:
        cdef i64 stack[256]
        cdef int sp = 0
        cdef i64 node, l, r, t, best_t = 0
        cdef double best_d2 = INFINITY
        cdef double dl, dr, d2, qx, qy, qz
        cdef double bx = 0, by = 0, bz = 0
        cdef Py_ssize_t s, k

        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(px, py, pz, &self.lo[node, 0], &self.hi[node, 0]) >= best_d2:
                continue
            if self.count[node] > 0:
                s = self.start[node]
                for k in range(self.count[node]):
                    t = s + k
                    d2 = _tri_cp(px, py, pz,
                                 &self.tri[t, 0, 0], &self.tri[t, 1, 0],
                                 &self.tri[t, 2, 0], &qx, &qy, &qz)
                    if d2 < best_d2:
                        best_d2 = d2
                        best_t = t
                        bx = qx; by = qy; bz = qz
            else:
                l = self.left[node]
                r = self.right[node]
                dl = _box_d2(px, py, pz, &self.lo[l, 0], &self.hi[l, 0])
                dr = _box_d2(px, py, pz, &self.lo[r, 0], &self.hi[r, 0])
                if dl <= dr:
                    if dr < best_d2 and sp < 254:
                        stack[sp] = r
                        sp += 1
                    if dl < best_d2:
                        stack[sp] = l
                        sp += 1
                else:
                    if dl < best_d2 and sp < 254:
                        stack[sp] = l
                        sp += 1
                    if dr < best_d2:
                        stack[sp] = r
                        sp += 1

        foot[0] = bx; foot[1] = by; foot[2] = bz
        face[0] = self.order[best_t]
        dist[0] = sqrt(best_d2)
