"""Flat AABB tree over triangles, built once in NumPy.

The same flattened arrays drive both the compiled traversal kernel and
pure-Python consumers.  Median split on the longest centroid axis.
"""

import numpy as np

LEAF_SIZE = 8


def build_flat_bvh(vertices, faces, leaf_size=LEAF_SIZE):
    """Returns a dict of flat arrays describing the tree.

    ``order`` is the triangle permutation; a leaf node covers
    ``order[start:start+count]``.  Inner nodes have ``count == 0`` and
    children ``left``/``right``.
    """
    tri = vertices[faces]  # (m, 3, 3)
    m = len(tri)
    if m == 0:
        raise ValueError("bvh over empty triangle set")
    tri_lo = tri.min(axis=1)
    tri_hi = tri.max(axis=1)
    cent = tri.mean(axis=1)

    order = np.arange(m, dtype=np.int64)
    cap = max(2 * (2 * m // leaf_size + 2), 16)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)

    n_nodes = 1
    stack = [(0, 0, m)]  # (node id, range start, range end)
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        lo[node] = tri_lo[idx].min(axis=0)
        hi[node] = tri_hi[idx].max(axis=0)
        if e - s <= leaf_size:
            start[node] = s
            count[node] = e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = (e - s) // 2
        sel = np.argpartition(c[:, axis], half)
        order[s:e] = idx[sel]
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l, r
        stack.append((l, s, s + half))
        stack.append((r, s + half, e))

    return {
        "lo": np.ascontiguousarray(lo[:n_nodes]),
        "hi": np.ascontiguousarray(hi[:n_nodes]),
        "left": left[:n_nodes].copy(),
        "right": right[:n_nodes].copy(),
        "start": start[:n_nodes].copy(),
        "count": count[:n_nodes].copy(),
        "order": order,
    }
