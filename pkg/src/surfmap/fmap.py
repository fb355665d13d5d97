"""Functional maps between shapes and conversions to vertex maps.

Conventions
-----------
A :class:`FunctionalMap` ``C`` of shape ``(k_target, k_source)``
transports spectral coefficients from its source basis to its target
basis: ``b = C @ a``.

A :class:`PointMap` sends each source vertex to a target vertex index
(-1 where unmatched).  For a vertex map ``T: S_i -> S_j`` with 0/1
matrix ``Pi`` (``Pi f`` pulls a function on ``S_j`` back to ``S_i``),
the induced functional map is

    C = Phi_i^+ Pi Phi_j,        Phi_i^+ = Phi_i^T A_i,

which transports coefficients from ``S_j`` to ``S_i``.  Conversely a
functional map is converted back to a vertex map by nearest neighbors
between the rows of ``Phi_i`` and the rows of ``Phi_j C^T``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ContractError, ShapeError, SingularityError
from .proximity import nearest_rows
from .spectral import project


@dataclass(frozen=True)
class FunctionalMap:
    """Spectral transport matrix ``C`` with its endpoint ids."""

    C: np.ndarray
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        if C.ndim != 2:
            raise ShapeError("functional map must be a 2-D matrix")
        if not np.all(np.isfinite(C)):
            raise ContractError("functional map contains non-finite values")
        object.__setattr__(self, "C", C)

    @property
    def k_source(self):
        return self.C.shape[1]

    @property
    def k_target(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class PointMap:
    """Vertex assignments source -> target; -1 marks unmatched vertices."""

    assignments: np.ndarray
    n_target: int
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        if a.ndim != 1:
            raise ShapeError("assignments must be 1-D")
        if len(a) and (a.min() < -1 or a.max() >= self.n_target):
            raise ContractError("assignment index out of range")
        object.__setattr__(self, "assignments", a)

    @property
    def n_source(self):
        return len(self.assignments)

    @property
    def valid(self):
        return self.assignments >= 0

    @property
    def coverage(self):
        return float(np.count_nonzero(self.valid)) / max(self.n_source, 1)


def nn_init(source_mesh, target_mesh, transform=None, max_distance=None,
            source_id="", target_id=""):
    """Initial vertex map by Euclidean nearest target vertex.

    ``transform`` (a rigid transform or ``(R, t)``) is applied to the
    source vertices first.  Matches farther than ``max_distance`` mm are
    masked out.
    """
    if target_mesh.n_vertices == 0:
        raise ContractError("nn_init: empty target mesh")
    pts = source_mesh.vertices
    if transform is not None:
        if hasattr(transform, "apply"):
            pts = transform.apply(pts)
        else:
            R, t = transform
            pts = pts @ np.asarray(R, float).T + np.asarray(t, float)
    idx, _ = nearest_rows(target_mesh.vertices, pts, max_distance=max_distance)
    return PointMap(
        assignments=idx,
        n_target=target_mesh.n_vertices,
        source_id=source_id,
        target_id=target_id,
    )


def _check_id(declared, given, role):
    if declared and given and declared != given:
        raise ContractError(
            f"{role} mismatch: map says {declared!r}, basis is {given!r}"
        )


def fmap_from_p2p(pmap, basis_source, basis_target, k=None):
    """Functional map induced by a vertex map (see module notes).

    ``basis_source``/``basis_target`` belong to the point map's source
    and target shapes.  The result transports coefficients from the
    point map's *target* to its *source*.  ``k`` truncates both bases
    (``int`` or ``(k_source, k_target)``).  Masked source vertices drop
    out of both factors of the product.
    """
    _check_id(pmap.source_id, basis_source.shape_id, "source")
    _check_id(pmap.target_id, basis_target.shape_id, "target")
    if pmap.n_source != basis_source.n or pmap.n_target != basis_target.n:
        raise ShapeError("point map endpoints do not match basis sizes")
    if k is None:
        k_src, k_tgt = basis_source.k, basis_target.k
    elif np.isscalar(k):
        k_src = k_tgt = int(k)
    else:
        k_src, k_tgt = map(int, k)
    if k_src > basis_source.k or k_tgt > basis_target.k:
        raise ContractError("truncation exceeds basis size")
    valid = pmap.valid
    if not valid.any():
        raise ContractError("point map is entirely masked")
    phi_s = basis_source.phi[valid, :k_src]
    a_s = basis_source.mass[valid]
    phi_t = basis_target.phi[pmap.assignments[valid], :k_tgt]
    C = phi_s.T @ (a_s[:, None] * phi_t)
    return FunctionalMap(
        C=C, source_id=pmap.target_id, target_id=pmap.source_id
    )


def p2p_from_fmap(fmap, basis_source, basis_target):
    """Vertex map recovered from a functional map by nearest neighbors.

    Produces the map ``S_source -> S_target`` where ``fmap`` transports
    coefficients target -> source (the orientation
    :func:`fmap_from_p2p` emits).  Each source vertex matches the
    target vertex whose aligned spectral embedding row is nearest;
    exact ties go to the lowest index.
    """
    _check_id(fmap.target_id, basis_source.shape_id, "source")
    _check_id(fmap.source_id, basis_target.shape_id, "target")
    k_src = fmap.k_target
    k_tgt = fmap.k_source
    if k_src > basis_source.k or k_tgt > basis_target.k:
        raise ContractError("functional map larger than the given bases")
    emb_source = basis_source.phi[:, :k_src]
    emb_target = basis_target.phi[:, :k_tgt] @ fmap.C.T
    idx, dist = nearest_rows(emb_target, emb_source)
    pmap = PointMap(
        assignments=idx,
        n_target=basis_target.n,
        source_id=fmap.target_id,
        target_id=fmap.source_id,
    )
    return pmap, dist


def fit_fmap(coeffs_source, coeffs_target, alpha=1e-3,
             lam_source=None, lam_target=None, source_id="", target_id=""):
    """Least-squares functional map from matched descriptor coefficients.

    Minimizes ``||C A - B||_F^2`` plus ``alpha`` times the
    Laplacian-commutativity penalty ``||C diag(lam_s) - diag(lam_t) C||^2``,
    which decouples into one positive-definite system per row of ``C``.

    ``coeffs_source`` and ``coeffs_target`` are ``(k_s, q)`` and
    ``(k_t, q)`` stacks of corresponding descriptors.
    """
    A = np.atleast_2d(np.asarray(coeffs_source, dtype=np.float64))
    B = np.atleast_2d(np.asarray(coeffs_target, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ShapeError(
            f"descriptor counts differ: {A.shape[1]} vs {B.shape[1]}"
        )
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    k_s, k_t = A.shape[0], B.shape[0]
    if alpha > 0:
        if lam_source is None or lam_target is None:
            raise ContractError(
                "commutativity regularization needs both eigenvalue vectors"
            )
        lam_source = np.asarray(lam_source, dtype=np.float64)
        lam_target = np.asarray(lam_target, dtype=np.float64)
        if lam_source.shape != (k_s,) or lam_target.shape != (k_t,):
            raise ShapeError("eigenvalue vectors must match coefficient rows")

    AAt = A @ A.T
    ABt = A @ B.T  # column r is the rhs for row r of C
    C = np.empty((k_t, k_s))
    if alpha == 0:
        try:
            cho = scipy.linalg.cho_factor(AAt)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(
                "normal equations are rank deficient; use alpha > 0"
            ) from exc
        C[:] = scipy.linalg.cho_solve(cho, ABt).T
    else:
        for r in range(k_t):
            D = (lam_source - lam_target[r]) ** 2
            try:
                cho = scipy.linalg.cho_factor(AAt + alpha * np.diag(D))
            except np.linalg.LinAlgError as exc:
                raise SingularityError(
                    f"row {r} normal equations are rank deficient"
                ) from exc
            C[r] = scipy.linalg.cho_solve(cho, ABt[:, r])
    return FunctionalMap(C=C, source_id=source_id, target_id=target_id)


def fit_fmap_fields(fields_source, fields_target, basis_source, basis_target,
                    alpha=1e-3):
    """Convenience wrapper: project vertex descriptor fields and fit."""
    A = project(fields_source, basis_source)
    B = project(fields_target, basis_target)
    return fit_fmap(
        A, B, alpha=alpha,
        lam_source=basis_source.lam, lam_target=basis_target.lam,
        source_id=basis_source.shape_id, target_id=basis_target.shape_id,
    )


@dataclass(frozen=True)
class ZoomoutResult:
    pointmap: "PointMap"
    fmap: "FunctionalMap"
    residuals: np.ndarray = field(repr=False)


def zoomout_refine(pmap, basis_source, basis_target,
                   k_start=20, k_end=65, step=5):
    """Spectral upsampling of a vertex map.

    Alternates the two conversions while growing the spectral size from
    ``k_start`` to ``k_end``: the current vertex map induces a
    functional map at size ``k``, nearest neighbors in the aligned
    embedding re-assign the vertices, and ``k`` grows by ``step``.
    Vertices masked in the input stay masked.  Returns the refined map,
    the final functional map at ``k_end`` and the per-round mean
    embedding residuals.
    """
    if not 1 <= k_start <= k_end:
        raise ContractError("need 1 <= k_start <= k_end")
    if step < 1:
        raise ContractError("step must be >= 1")
    if k_end > basis_source.k or k_end > basis_target.k:
        raise ContractError(
            f"k_end={k_end} exceeds basis sizes "
            f"({basis_source.k}, {basis_target.k})"
        )
    masked = ~pmap.valid
    if masked.all():
        raise ContractError("point map is entirely masked")

    ks = list(range(k_start, k_end + 1, step))
    if ks[-1] != k_end:
        ks.append(k_end)

    residuals = []
    current = pmap
    for k in ks:
        fm = fmap_from_p2p(current, basis_source, basis_target, k=k)
        refined, dist = p2p_from_fmap(fm, basis_source, basis_target)
        assignments = refined.assignments.copy()
        assignments[masked] = -1
        current = PointMap(
            assignments=assignments,
            n_target=pmap.n_target,
            source_id=pmap.source_id,
            target_id=pmap.target_id,
        )
        residuals.append(float(dist[~masked].mean()))

    final = fmap_from_p2p(current, basis_source, basis_target, k=k_end)
    return ZoomoutResult(
        pointmap=current, fmap=final, residuals=np.asarray(residuals)
    )
