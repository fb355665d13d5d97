"""Triangle meshes and the discrete operators built on them.

Vertex positions are in millimetres throughout.  Meshes are immutable
after construction; all operations return new objects.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    ContractError,
    DegenerateInputError,
    NotWatertightError,
    ShapeError,
)

MM3_PER_ML = 1000.0


def _freeze(a):
    a.setflags(write=False)
    return a


class TriMesh:
    """Indexed triangle surface with optional per-vertex boolean labels.

    Parameters
    ----------
    vertices : (n, 3) float array
        Positions in mm.
    faces : (m, 3) int array
        Vertex indices, counter-clockwise when seen from outside.
    vertex_labels : dict of str -> (n,) bool array, optional
        Named vertex subsets (ROIs, masks).  Copied and frozen.
    vertex_scalars : dict of str -> (n,) float array, optional
        Named per-vertex fields (exported to PLY properties).
    """

    def __init__(self, vertices, faces, vertex_labels=None, vertex_scalars=None):
        vertices = np.array(vertices, dtype=np.float64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ShapeError(f"vertices must be (n, 3), got {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            raise ContractError("vertices contain non-finite values")
        if faces is None:
            faces = np.empty((0, 3), dtype=np.int64)
        faces = np.array(faces, dtype=np.int64, copy=True)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ShapeError(f"faces must be (m, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise ContractError("face index out of range")
            degen = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 2] == faces[:, 0])
            )
            if degen.any():
                raise ContractError(
                    f"face {int(np.flatnonzero(degen)[0])} repeats a vertex"
                )
        self.vertices = _freeze(vertices)
        self.faces = _freeze(faces)
        labels = {}
        for name, mask in (vertex_labels or {}).items():
            mask = np.array(mask, dtype=bool, copy=True)
            if mask.shape != (len(vertices),):
                raise ShapeError(f"label {name!r} has shape {mask.shape}")
            labels[name] = _freeze(mask)
        self.vertex_labels = labels
        scalars = {}
        for name, field in (vertex_scalars or {}).items():
            field = np.array(field, dtype=np.float64, copy=True)
            if field.shape != (len(vertices),):
                raise ShapeError(f"scalar {name!r} has shape {field.shape}")
            scalars[name] = _freeze(field)
        self.vertex_scalars = scalars

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def label(self, name):
        if name not in self.vertex_labels:
            raise ContractError(f"mesh has no label {name!r}")
        return self.vertex_labels[name]

    def with_labels(self, **labels):
        """New mesh sharing geometry, with labels added/replaced."""
        merged = dict(self.vertex_labels)
        merged.update(labels)
        return TriMesh(self.vertices, self.faces, merged, self.vertex_scalars)

    def with_scalars(self, **scalars):
        merged = dict(self.vertex_scalars)
        merged.update(scalars)
        return TriMesh(self.vertices, self.faces, self.vertex_labels, merged)

    def transformed(self, rotation=None, translation=None):
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, float).T
        if translation is not None:
            v = v + np.asarray(translation, float)
        return TriMesh(v, self.faces, self.vertex_labels, self.vertex_scalars)

    # -- derived quantities (cached; arrays are frozen) --

    @cached_property
    def face_corners(self):
        """(m, 3, 3) corner positions."""
        return _freeze(self.vertices[self.faces])

    @cached_property
    def face_cross(self):
        c = self.face_corners
        return _freeze(
            np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        )

    @cached_property
    def face_areas(self):
        return _freeze(0.5 * np.linalg.norm(self.face_cross, axis=1))

    @cached_property
    def face_normals(self):
        n = self.face_cross.copy()
        nrm = np.linalg.norm(n, axis=1)
        ok = nrm > 0
        n[ok] /= nrm[ok, None]
        return _freeze(n)

    @cached_property
    def vertex_areas(self):
        """Lumped barycentric vertex areas: one third of incident face area."""
        a = np.zeros(self.n_vertices)
        third = self.face_areas / 3.0
        for c in range(3):
            np.add.at(a, self.faces[:, c], third)
        return _freeze(a)

    @cached_property
    def vertex_normals(self):
        n = np.zeros((self.n_vertices, 3))
        w = self.face_cross  # area-weighted
        for c in range(3):
            np.add.at(n, self.faces[:, c], w)
        nrm = np.linalg.norm(n, axis=1)
        ok = nrm > 0
        n[ok] /= nrm[ok, None]
        return _freeze(n)

    @cached_property
    def edges(self):
        """(e, 2) unique undirected edges, each row sorted."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e.sort(axis=1)
        return _freeze(np.unique(e, axis=0))

    @cached_property
    def _edge_face_counts(self):
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    @cached_property
    def boundary_edges(self):
        uniq, counts = self._edge_face_counts
        return _freeze(uniq[counts == 1])

    @cached_property
    def boundary_vertices(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[np.unique(self.boundary_edges)] = True
        return _freeze(mask)

    @cached_property
    def is_watertight(self):
        _, counts = self._edge_face_counts
        return bool(len(counts)) and bool(np.all(counts == 2))

    @cached_property
    def vertex_adjacency(self):
        """Sparse symmetric vertex adjacency (bool csr)."""
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e), dtype=bool)
        ij = np.concatenate([e, e[:, ::-1]])
        return sparse.csr_matrix(
            (data, (ij[:, 0], ij[:, 1])), shape=(n, n)
        )

    @cached_property
    def bbox(self):
        if self.n_vertices == 0:
            raise DegenerateInputError("empty mesh has no bounding box")
        return _freeze(
            np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])
        )

    @property
    def bbox_diagonal(self):
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def __repr__(self):
        return f"TriMesh({self.n_vertices} vertices, {self.n_faces} faces)"


def submesh(mesh, vertex_mask):
    """Restrict to faces whose three vertices are all selected.

    Returns ``(sub, old_index)`` where ``old_index[i]`` is the index in
    ``mesh`` of vertex ``i`` of ``sub``.  Labels are carried over.
    """
    vertex_mask = np.asarray(vertex_mask, dtype=bool)
    if vertex_mask.shape != (mesh.n_vertices,):
        raise ShapeError("vertex_mask length mismatch")
    keep_f = vertex_mask[mesh.faces].all(axis=1)
    faces = mesh.faces[keep_f]
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[faces.ravel()] = True
    old_index = np.flatnonzero(used)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[old_index] = np.arange(len(old_index))
    labels = {k: v[old_index] for k, v in mesh.vertex_labels.items()}
    scalars = {k: v[old_index] for k, v in mesh.vertex_scalars.items()}
    return (
        TriMesh(mesh.vertices[old_index], remap[faces], labels, scalars),
        old_index,
    )


def _merge_duplicate_vertices(vertices, faces, tol):
    tree = cKDTree(vertices)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return vertices, faces, np.arange(len(vertices))
    # union-find, representative = lowest index in each duplicate group
    parent = np.arange(len(vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    rep = np.array([find(i) for i in range(len(vertices))])
    return vertices, rep[faces], rep


def clean_mesh(mesh, merge_tol=1e-6):
    """Canonical cleanup: merge duplicates, drop degenerate faces, keep
    the largest component, drop unreferenced vertices.

    Duplicate vertices (closer than ``merge_tol`` mm) collapse onto the
    lowest index of their group.  Among connected components the one with
    the largest total face area survives.  Raises
    :class:`DegenerateInputError` if nothing is left.
    """
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if len(verts) == 0:
        raise DegenerateInputError("clean_mesh: empty input")

    verts, faces, _ = _merge_duplicate_vertices(verts, faces, merge_tol)

    if len(faces):
        ok = (
            (faces[:, 0] != faces[:, 1])
            & (faces[:, 1] != faces[:, 2])
            & (faces[:, 2] != faces[:, 0])
        )
        faces = faces[ok]

    if len(faces):
        c = verts[faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1
        )
        diag = np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))
        faces = faces[areas > 1e-10 * max(diag, 1.0) ** 2]

    if len(faces) == 0:
        raise DegenerateInputError("clean_mesh: no valid faces remain")

    # largest component by total face area
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n = len(verts)
    adj = sparse.csr_matrix(
        (np.ones(len(e), dtype=np.int8), (e[:, 0], e[:, 1])), shape=(n, n)
    )
    n_comp, comp = connected_components(adj, directed=False)
    if n_comp > 1:
        c = verts[faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1
        )
        face_comp = comp[faces[:, 0]]
        comp_area = np.bincount(face_comp, weights=areas, minlength=n_comp)
        faces = faces[face_comp == np.argmax(comp_area)]

    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    old_index = np.flatnonzero(used)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[old_index] = np.arange(len(old_index))
    labels = {k: np.asarray(v)[old_index] for k, v in mesh.vertex_labels.items()}
    scalars = {k: np.asarray(v)[old_index] for k, v in mesh.vertex_scalars.items()}
    return TriMesh(verts[old_index], remap[faces], labels, scalars)


@dataclass(frozen=True)
class LaplacianPair:
    """Stiffness matrix ``W`` (sparse, PSD) and lumped vertex masses."""

    W: sparse.csr_matrix
    mass: np.ndarray

    @property
    def n(self):
        return len(self.mass)

    @property
    def A(self):
        """Mass matrix as a sparse diagonal."""
        return sparse.diags(self.mass)


def cotangent_laplacian(mesh, clamp_negative=False):
    """Cotangent stiffness matrix and barycentric lumped mass.

    ``W`` has off-diagonal entries ``-(cot a + cot b)/2`` (one cotangent
    on boundary edges), a diagonal making each row sum to zero, and is
    positive semi-definite.  ``L = A^{-1} W`` is the discrete
    Laplace-Beltrami operator; its spectrum is that of the generalized
    problem ``W phi = lam A phi``.

    Negative edge weights from obtuse triangles are kept by default;
    ``clamp_negative=True`` floors them at zero.
    """
    if mesh.n_faces == 0:
        raise DegenerateInputError("cotangent_laplacian: mesh has no faces")
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices

    areas = mesh.face_areas
    good = areas > 0

    rows, cols, vals = [], [], []
    for corner, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
        u = v[f[:, i]] - v[f[:, corner]]
        w = v[f[:, j]] - v[f[:, corner]]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        cot = np.zeros(len(f))
        cot[good] = np.einsum("ij,ij->i", u, w)[good] / cross[good]
        half = 0.5 * cot
        if clamp_negative:
            half = np.maximum(half, 0.0)
        rows.extend([f[:, i], f[:, j]])
        cols.extend([f[:, j], f[:, i]])
        vals.extend([-half, -half])

    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    diag = -np.asarray(W.sum(axis=1)).ravel()
    W = W + sparse.diags(diag)

    mass = np.zeros(n)
    third = areas / 3.0
    for c in range(3):
        np.add.at(mass, f[:, c], third)
    if np.any(mass <= 0):
        bad = int(np.flatnonzero(mass <= 0)[0])
        raise DegenerateInputError(
            f"vertex {bad} has no incident face area; clean the mesh first"
        )
    return LaplacianPair(W=W.tocsr(), mass=mass)


def signed_volume(mesh):
    """Signed enclosed volume of a closed oriented surface, in mL.

    One sixth of the summed determinants of the face corner triples,
    taken about the vertex centroid so the result is insensitive to the
    placement of the origin.  Coordinates are millimetres, so the sum is
    divided by 1000 to report millilitres, the unit the volume tables
    use.  Raises :class:`NotWatertightError` on open or non-manifold
    input.
    """
    if mesh.n_faces == 0:
        raise NotWatertightError("mesh has no faces", boundary_edges=0)
    uniq, counts = mesh._edge_face_counts
    open_edges = int(np.count_nonzero(counts != 2))
    if open_edges:
        raise NotWatertightError("mesh is not watertight", boundary_edges=open_edges)
    # orientation consistency: every directed edge appears exactly once
    de = np.concatenate(
        [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]
    )
    if len(np.unique(de, axis=0)) != len(de):
        raise NotWatertightError(
            "mesh orientation is inconsistent", boundary_edges=0
        )
    c = mesh.face_corners - mesh.vertices.mean(axis=0)
    dets = np.einsum(
        "ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])
    )
    return float(dets.sum() / 6.0) / 1000.0


def subdivide_midpoint(mesh, rounds=1):
    """1-to-4 midpoint subdivision.  The surface is unchanged as a point
    set; only the tessellation is refined.  A midpoint inherits a label
    when both edge endpoints carry it.
    """
    out = mesh
    for _ in range(rounds):
        v = out.vertices
        f = out.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e_sorted = np.sort(e, axis=1)
        uniq, inv = np.unique(e_sorted, axis=0, return_inverse=True)
        mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
        mid_idx = len(v) + inv.reshape(3, -1)  # rows: m01, m12, m20
        m01, m12, m20 = mid_idx
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        new_f = np.concatenate(
            [
                np.stack([a, m01, m20], axis=1),
                np.stack([m01, b, m12], axis=1),
                np.stack([m20, m12, c], axis=1),
                np.stack([m01, m12, m20], axis=1),
            ]
        )
        labels = {
            k: np.concatenate([lab, lab[uniq[:, 0]] & lab[uniq[:, 1]]])
            for k, lab in out.vertex_labels.items()
        }
        scalars = {
            k: np.concatenate([s, 0.5 * (s[uniq[:, 0]] + s[uniq[:, 1]])])
            for k, s in out.vertex_scalars.items()
        }
        out = TriMesh(np.concatenate([v, mid]), new_f, labels, scalars)
    return out


def _vertex_quadrics(mesh):
    """Plane quadrics per vertex (area-weighted), plus rim constraints.

    Boundary edges add a perpendicular plane through the edge with a
    strong weight so open rims resist drifting inward.
    """
    n = mesh.n_vertices
    Q = np.zeros((n, 4, 4))
    nrm = mesh.face_normals
    d = -np.einsum("ij,ij->i", nrm, mesh.face_corners[:, 0])
    planes = np.concatenate([nrm, d[:, None]], axis=1)
    K = mesh.face_areas[:, None, None] * np.einsum(
        "ij,ik->ijk", planes, planes
    )
    for c in range(3):
        np.add.at(Q, mesh.faces[:, c], K)

    if len(mesh.boundary_edges):
        # map each boundary edge to its single incident face
        e_all = np.concatenate(
            [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]
        )
        e_all.sort(axis=1)
        face_of = {}
        for row, (a, b) in enumerate(e_all):
            face_of.setdefault((int(a), int(b)), []).append(row % mesh.n_faces)
        for a, b in mesh.boundary_edges:
            f = face_of[(int(a), int(b))][0]
            ev = mesh.vertices[b] - mesh.vertices[a]
            m = np.cross(ev, nrm[f])
            ln = np.linalg.norm(m)
            if ln == 0:
                continue
            m /= ln
            plane = np.append(m, -m @ mesh.vertices[a])
            Kb = 1e3 * (ev @ ev) * np.outer(plane, plane)
            Q[a] += Kb
            Q[b] += Kb
    return Q


def _optimal_collapse(Q, pa, pb):
    """Placement minimizing the homogeneous quadric, and its cost."""
    A = Q[:3, :3]
    b = -Q[:3, 3]
    try:
        p = np.linalg.solve(A, b)
        if not np.all(np.isfinite(p)):
            raise np.linalg.LinAlgError
        cands = [p, 0.5 * (pa + pb), pa, pb]
    except np.linalg.LinAlgError:
        cands = [0.5 * (pa + pb), pa, pb]
    best, best_cost = None, np.inf
    for c in cands:
        h = np.append(c, 1.0)
        cost = float(h @ Q @ h)
        if cost < best_cost:
            best, best_cost = c, cost
    return best, best_cost


def decimate(mesh, target_vertices):
    """Simplify to roughly ``target_vertices`` by quadric edge collapse.

    Greedy lowest-error collapses with the usual guards: the link
    condition (no pinching, boundary edges included) and a normal-flip
    test on every surviving incident face.  A closed input stays
    closed.  Labels and scalars follow the surviving vertices.  Targets
    at or above the current count return the mesh unchanged.
    """
    import heapq

    if target_vertices < 4:
        raise ContractError("cannot decimate below a tetrahedron")
    if target_vertices >= mesh.n_vertices:
        return mesh

    V = mesh.vertices.copy()
    F = mesh.faces.copy()
    Q = _vertex_quadrics(mesh)
    alive = np.ones(mesh.n_vertices, dtype=bool)
    face_alive = np.ones(mesh.n_faces, dtype=bool)
    vert_faces = [set() for _ in range(mesh.n_vertices)]
    for fi, tri in enumerate(F):
        for v in tri:
            vert_faces[v].add(fi)
    on_rim = mesh.boundary_vertices.copy()
    version = np.zeros(mesh.n_vertices, dtype=np.int64)

    def neighbors(u):
        out = set()
        for fi in vert_faces[u]:
            out.update(F[fi])
        out.discard(u)
        return out

    heap = []
    counter = 0
    def push(u, v):
        nonlocal counter
        if u > v:
            u, v = v, u
        pos, cost = _optimal_collapse(Q[u] + Q[v], V[u], V[v])
        heapq.heappush(
            heap, (cost, counter, u, v, pos, version[u] + version[v])
        )
        counter += 1

    for u, v in mesh.edges:
        push(int(u), int(v))

    n_alive = mesh.n_vertices
    while n_alive > target_vertices and heap:
        cost, _, u, v, pos, stamp = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or stamp != version[u] + version[v]:
            continue
        shared_faces = vert_faces[u] & vert_faces[v]
        if not shared_faces:
            continue
        # link condition: common neighbors are exactly the edge's wing
        # vertices, otherwise the collapse pinches the surface
        wings = {int(w) for fi in shared_faces for w in F[fi]} - {u, v}
        if neighbors(u) & neighbors(v) != wings:
            continue
        if on_rim[u] and on_rim[v] and len(shared_faces) != 1:
            continue
        # reject placements that flip any surviving face
        flipped = False
        for fi in (vert_faces[u] | vert_faces[v]) - shared_faces:
            tri = F[fi]
            old = [V[w] for w in tri]
            new = [pos if w in (u, v) else V[w] for w in tri]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if n_new @ n_old <= 1e-12 * (n_old @ n_old):
                flipped = True
                break
        if flipped:
            continue

        V[u] = pos
        Q[u] = Q[u] + Q[v]
        on_rim[u] = on_rim[u] or on_rim[v]
        for fi in shared_faces:
            face_alive[fi] = False
            for w in F[fi]:
                vert_faces[w].discard(fi)
        for fi in vert_faces[v]:
            F[fi][F[fi] == v] = u
            vert_faces[u].add(fi)
        vert_faces[v] = set()
        alive[v] = False
        version[u] += 1
        version[v] += 1
        n_alive -= 1
        for w in neighbors(u):
            push(u, int(w))

    keep = np.flatnonzero(alive)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    new_faces = remap[F[face_alive]]
    labels = {k: lab[keep] for k, lab in mesh.vertex_labels.items()}
    scalars = {k: s[keep] for k, s in mesh.vertex_scalars.items()}
    return TriMesh(V[keep], new_faces, labels, scalars)
