"""Euclidean-space analysis: ROI handling, rigid alignment and
volume-change estimation.

Anatomical frame convention (declared per dataset in the manifest):
x lateral, y depth (anterior positive), z up.  All lengths in mm.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    ShapeError,
    SingularityError,
    TopologyError,
)
from .mesh import TriMesh, signed_volume
from .proximity import SurfaceLocator, nearest_rows


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ContractError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ContractError("rotation includes a reflection")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, radians, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        nrm = np.linalg.norm(axis)
        if nrm == 0:
            raise ContractError("rotation axis must be nonzero")
        x, y, z = axis / nrm
        K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
        R = np.eye(3) + np.sin(radians) * K + (1 - np.cos(radians)) * (K @ K)
        return cls(R, np.asarray(translation, dtype=np.float64))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other):
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return RigidTransform(
            self.rotation.T, -(self.rotation.T @ self.translation)
        )

    def rotation_angle(self):
        """Geodesic rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def as_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"]), np.asarray(d["translation"]))


@dataclass(frozen=True)
class DisplacementField:
    """Closest-point displacement vectors on ROI vertices of a base mesh.

    ``vectors`` is full-size ``(n, 3)`` and zero outside ``roi``;
    ``valid`` flags ROI vertices whose closest point did not fall on a
    boundary edge of the scan.
    """

    base_shape: str
    roi: np.ndarray
    vectors: np.ndarray
    valid: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.roi)
        if self.vectors.shape != (n, 3) or self.valid.shape != (n,):
            raise ShapeError("displacement field arrays disagree in size")
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("displacement vectors must be finite")
        if np.any(self.valid & ~self.roi):
            raise ContractError("valid flags outside the ROI")

    def magnitudes(self):
        return np.linalg.norm(self.vectors, axis=1)


# ------------------------------------------------------------ ROI masks

def _dilate(mask, adjacency):
    return mask | (adjacency @ mask)


def _erode(mask, adjacency):
    return mask & ~(adjacency @ ~mask)


def project_roi(ptv_points, skin, close=True):
    """Mark the skin vertices nearest to each PTV point.

    One ring of morphological closing (dilation then erosion on the
    vertex graph) removes pinholes; ``close=False`` returns the raw
    nearest-vertex union.
    """
    ptv_points = np.atleast_2d(np.asarray(ptv_points, dtype=np.float64))
    if ptv_points.size == 0:
        raise ContractError("project_roi: empty PTV point cloud")
    idx, _ = nearest_rows(skin.vertices, ptv_points)
    mask = np.zeros(skin.n_vertices, dtype=bool)
    mask[idx] = True
    if close:
        adj = skin.vertex_adjacency
        mask = _erode(_dilate(mask, adj), adj)
    return mask


def transfer_roi(mask, pmap):
    """Push a vertex mask forward along a point map.

    A target vertex is in the transferred mask iff some source vertex
    mapping onto it is masked.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pmap.n_source,):
        raise ShapeError("mask length does not match the map's source")
    out = np.zeros(pmap.n_target, dtype=bool)
    sel = mask & pmap.valid
    out[pmap.assignments[sel]] = True
    return out


@dataclass(frozen=True)
class BandOffsets:
    """Box edits producing the alignment band from the ROI bounding box.

    ``top_down``/``bottom_down`` lower the upper and lower z faces,
    ``lateral`` widens both x faces, ``depth`` deepens the posterior y
    face.  Defaults follow the 3/6/3/5 cm recipe.
    """

    top_down: float = 30.0
    bottom_down: float = 60.0
    lateral: float = 30.0
    depth: float = 50.0


def build_roi_band(skin, roi_mask, offsets=BandOffsets()):
    """Band of stable vertices around the ROI, and the band minus the ROI.

    The band is the set of skin vertices inside the ROI bounding box
    after the offset edits; the second mask (band minus ROI) is what
    rigid alignment should consume.
    """
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if roi_mask.shape != (skin.n_vertices,):
        raise ShapeError("roi_mask length mismatch")
    if not roi_mask.any():
        raise ContractError("build_roi_band: empty ROI")
    pts = skin.vertices[roi_mask]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    # x lateral, y depth (posterior negative), z up
    lo = lo + np.array([-offsets.lateral, -offsets.depth, -offsets.bottom_down])
    hi = hi + np.array([offsets.lateral, 0.0, -offsets.top_down])
    v = skin.vertices
    band = np.all((v >= lo) & (v <= hi), axis=1)
    if not band.any():
        raise ContractError(
            "band is empty; offsets exceed the mesh extent"
        )
    return band, band & ~roi_mask


# ------------------------------------------------------------ alignment

def rigid_from_correspondences(source, target, weights=None):
    """Weighted least-squares rigid fit ``R source + t ~ target``.

    Closed form via SVD of the weighted cross-covariance; reflections
    are excluded.  Degenerate (collinear or near-collinear) point sets
    raise :class:`SingularityError`.
    """
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if source.shape != target.shape or source.shape[1] != 3:
        raise ShapeError("source/target must be matching (n, 3) arrays")
    n = len(source)
    if n < 3:
        raise ContractError("need at least 3 correspondences")
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ShapeError("weights length mismatch")
        if weights.min() < 0:
            raise ContractError("weights must be non-negative")
    wsum = weights.sum()
    if wsum <= 0:
        raise ContractError("total weight must be positive")
    w = weights / wsum
    cs = w @ source
    ct = w @ target
    H = (source - cs).T @ ((target - ct) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise SingularityError(
            "correspondences are (near-)collinear; rotation is ambiguous"
        )
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, ct - R @ cs)


@dataclass(frozen=True)
class ICPResult:
    transform: RigidTransform
    rms: np.ndarray
    active: np.ndarray = field(repr=False)  # surviving points (input indexing)


def trimmed_icp(source_points, target_mesh, init=None,
                iterations=100, trim_every=5, trim_fraction=0.02):
    """Trimmed point-to-surface ICP.

    Each iteration matches the currently-retained source points to
    their exact closest points on the target surface and applies the
    best rigid update.  Every ``trim_every`` iterations the
    ``trim_fraction`` of points with the worst residuals is removed
    permanently.  The RMS log is over retained points at the pose of
    each iteration (before its update) and is non-increasing.
    """
    pts = np.atleast_2d(np.asarray(source_points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("source points must be (n, 3)")
    if len(pts) < 3:
        raise ContractError("need at least 3 source points")
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    if not 0 <= trim_fraction < 1:
        raise ContractError("trim_fraction must be in [0, 1)")
    T = init if init is not None else RigidTransform.identity()
    locator = (
        target_mesh
        if isinstance(target_mesh, SurfaceLocator)
        else SurfaceLocator(target_mesh)
    )

    active = np.arange(len(pts))
    rms = []
    for it in range(1, iterations + 1):
        cur = T.apply(pts[active])
        foot, _, dist = locator.query(cur)
        if trim_fraction > 0 and it % trim_every == 0:
            drop = int(trim_fraction * len(active))
            if drop > 0:
                if len(active) - drop < 3:
                    raise DegenerateInputError(
                        "trimming would leave fewer than 3 points"
                    )
                order = np.argsort(dist, kind="stable")
                keep = np.sort(order[: len(active) - drop])
                active = active[keep]
                cur = cur[keep]
                foot = foot[keep]
                dist = dist[keep]
        rms.append(float(np.sqrt(np.mean(dist**2))))
        delta = rigid_from_correspondences(cur, foot)
        T = delta.compose(T)

    mask = np.zeros(len(pts), dtype=bool)
    mask[active] = True
    return ICPResult(transform=T, rms=np.asarray(rms), active=mask)


# ------------------------------------------------------- displacements

def displacement_field(ct_skin, roi_mask, scan, max_distance=None):
    """Closest-point displacement from CT ROI vertices to the scan surface.

    ``delta(p) = closest_point(scan, p) - p`` for each ROI vertex.
    Vertices whose closest point lies on a boundary edge (or vertex) of
    the scan see the scan's cut rim rather than real anatomy and are
    flagged invalid, as are matches beyond ``max_distance`` if given.
    """
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if roi_mask.shape != (ct_skin.n_vertices,):
        raise ShapeError("roi_mask length mismatch")
    if not roi_mask.any():
        raise ContractError("displacement_field: empty ROI")
    locator = scan if isinstance(scan, SurfaceLocator) else SurfaceLocator(scan)
    scan_mesh = locator.mesh
    pts = ct_skin.vertices[roi_mask]
    foot, face, dist = locator.query(pts)

    valid_roi = np.ones(len(pts), dtype=bool)
    boundary = scan_mesh.boundary_edges
    if len(boundary):
        # a foot point lying on a boundary edge of its own face means the
        # true closest point is off the scan's coverage
        fb = _foot_on_boundary(scan_mesh, foot, face, boundary)
        valid_roi &= ~fb
    if max_distance is not None:
        valid_roi &= dist <= max_distance

    vectors = np.zeros((ct_skin.n_vertices, 3))
    vectors[roi_mask] = foot - pts
    valid = np.zeros(ct_skin.n_vertices, dtype=bool)
    valid[np.flatnonzero(roi_mask)[valid_roi]] = True
    return DisplacementField(
        base_shape=getattr(ct_skin, "shape_id", ""),
        roi=roi_mask,
        vectors=vectors,
        valid=valid,
    )


def _foot_on_boundary(scan, foot, face, boundary_edges, tol=1e-9):
    """True where a foot point lies on a boundary edge of its face."""
    is_boundary = set(map(tuple, boundary_edges))
    out = np.zeros(len(foot), dtype=bool)
    f = scan.faces
    v = scan.vertices
    for fi in np.unique(face):
        tri = f[fi]
        rows = np.flatnonzero(face == fi)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            if e not in is_boundary:
                continue
            pa, pb = v[tri[a]], v[tri[b]]
            ab = pb - pa
            L2 = ab @ ab
            t = np.clip((foot[rows] - pa) @ ab / L2, 0.0, 1.0)
            d = np.linalg.norm(pa + t[:, None] * ab - foot[rows], axis=1)
            scale = max(np.sqrt(L2), 1.0)
            out[rows[d <= tol * scale]] = True
    return out


def interpolate_invalid(roi_cut, delta_vectors, valid, max_rounds=None):
    """Fill invalid entries by averaging valid one-ring neighbors.

    Repeated rounds grow the filled front; entries that never gain a
    valid neighbor fall back to zero.  Returns the filled vectors and
    the count of zero-filled vertices.
    """
    adj = roi_cut.vertex_adjacency
    vec = np.array(delta_vectors, dtype=np.float64, copy=True)
    have = np.asarray(valid, dtype=bool).copy()
    rounds = 0
    while not have.all():
        counts = adj @ have.astype(np.float64)
        sums = adj @ (vec * have[:, None])
        frontier = ~have & (counts > 0)
        if not frontier.any():
            break
        vec[frontier] = sums[frontier] / counts[frontier][:, None]
        have |= frontier
        rounds += 1
        if max_rounds is not None and rounds >= max_rounds:
            break
    unreachable = int(np.count_nonzero(~have))
    vec[~have] = 0.0
    return vec, unreachable


# ------------------------------------------------------------- volumes

SOURCE_VERTEX = "source_vertex"


def close_roi(skin, roi_mask):
    """Extract the ROI patch and close its boundary loop with a fan.

    Keeps the largest-area connected piece of the patch, requires a
    single simple boundary loop, and caps it with triangles fanning from
    the loop centroid.  The result carries a ``source_vertex`` scalar
    channel mapping each vertex back to its skin index (-1 for the cap
    apex).  An already-closed input comes back unchanged apart from that
    channel.
    """
    from .mesh import submesh

    roi_mask = np.asarray(roi_mask, dtype=bool)
    if not roi_mask.any():
        raise ContractError("close_roi: empty ROI")
    patch, old_index = submesh(skin, roi_mask)
    if patch.n_faces == 0:
        raise DegenerateInputError("ROI contains no complete faces")

    # largest connected piece by area
    from scipy import sparse
    from scipy.sparse.csgraph import connected_components

    e = np.concatenate(
        [patch.faces[:, [0, 1]], patch.faces[:, [1, 2]], patch.faces[:, [2, 0]]]
    )
    adj = sparse.csr_matrix(
        (np.ones(len(e), dtype=np.int8), (e[:, 0], e[:, 1])),
        shape=(patch.n_vertices, patch.n_vertices),
    )
    n_comp, comp = connected_components(adj, directed=False)
    if n_comp > 1:
        face_comp = comp[patch.faces[:, 0]]
        areas = patch.face_areas
        comp_area = np.bincount(face_comp, weights=areas, minlength=n_comp)
        keep = comp == np.argmax(comp_area)
        patch, sub_old = submesh(patch, keep)
        old_index = old_index[sub_old]

    de = np.concatenate(
        [patch.faces[:, [0, 1]], patch.faces[:, [1, 2]], patch.faces[:, [2, 0]]]
    )
    seen = set(map(tuple, de))
    boundary = [e for e in map(tuple, de) if (e[1], e[0]) not in seen]
    source = old_index.astype(np.float64)
    if not boundary:
        return patch.with_scalars(**{SOURCE_VERTEX: source})

    succ = {}
    for a, b in boundary:
        if a in succ:
            raise TopologyError(
                "ROI boundary is not a simple loop", loops=None
            )
        succ[a] = b
    loops = []
    remaining = dict(succ)
    while remaining:
        start = min(remaining)
        loop = [start]
        cur = remaining.pop(start)
        while cur != start:
            loop.append(cur)
            cur = remaining.pop(cur)
        loops.append(loop)
    if len(loops) != 1:
        raise TopologyError(
            f"ROI boundary has {len(loops)} loops; expected 1",
            loops=len(loops),
        )

    loop = loops[0]
    centroid = patch.vertices[loop].mean(axis=0)
    apex = patch.n_vertices
    cap = np.array(
        [[b, a, apex] for a, b in zip(loop, loop[1:] + [loop[0]])],
        dtype=np.int64,
    )
    verts = np.vstack([patch.vertices, centroid])
    faces = np.vstack([patch.faces, cap])
    scalars = {SOURCE_VERTEX: np.concatenate([source, [-1.0]])}
    labels = {
        k: np.concatenate([lab, [False]])
        for k, lab in patch.vertex_labels.items()
    }
    return TriMesh(verts, faces, labels, scalars)


def volume_change(roi_cut, delta):
    """Relative ROI volume change (%) induced by a displacement field.

    ``roi_cut`` must carry the ``source_vertex`` channel produced by
    :func:`close_roi`.  Cap vertices — the apex and the boundary ring
    its fan attaches to — are held fixed (``delta = 0``): the cap is
    the chest-wall side, and letting the ring drift would leak its
    motion times the whole cap area into the balance.  Invalid field
    entries are interpolated from valid ring neighbors before
    deforming.  Self-intersections of the deformed surface are not
    detected; the signed volume stays well-defined.
    """
    if SOURCE_VERTEX not in roi_cut.vertex_scalars:
        raise ContractError("roi_cut lacks the source_vertex channel")
    src = roi_cut.vertex_scalars[SOURCE_VERTEX].astype(np.int64)
    n = roi_cut.n_vertices
    vec = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    on_skin = src >= 0
    vec[on_skin] = delta.vectors[src[on_skin]]
    valid[on_skin] = delta.valid[src[on_skin]] & delta.roi[src[on_skin]]
    valid[~on_skin] = True  # cap apex: fixed, delta 0
    cap = ~on_skin
    if cap.any():
        ring = np.zeros(n, dtype=bool)
        touches = cap[roi_cut.faces].any(axis=1)
        ring[roi_cut.faces[touches]] = True
        vec[ring] = 0.0
        valid[ring] = True
    vec, _ = interpolate_invalid(roi_cut, vec, valid)

    v0 = signed_volume(roi_cut)
    if v0 == 0:
        raise DegenerateInputError("reference ROI volume is zero")
    deformed = TriMesh(roi_cut.vertices + vec, roi_cut.faces)
    v1 = signed_volume(deformed)
    return (v1 - v0) / v0 * 100.0
