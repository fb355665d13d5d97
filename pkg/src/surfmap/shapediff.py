"""Intrinsic variability analysis on latent functional domains.

Each shape's deviation from its collection's limit domain is encoded by
a characteristic shape difference (CSD): a small symmetric operator,
``Y'Y`` for area distortion or ``Lambda0^+ Y' diag(lam) Y`` for
conformal (angle) distortion.  Aggregating squared CSD differences over
a set of shapes yields variability operators whose top eigenfunctions,
pushed back to vertices, localize where the collection changes.

Two aggregations are provided: the all-pairs energy E (total
variability) and a signed contrast H that rewards variation across one
label axis while penalizing variation across the other, so the same
machinery isolates either within-group or between-group change
depending on how the (group, member) labels are assigned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MissingShapeError, ShapeError
from .spectral import canonical_signs

_KINDS = ("area", "conformal")
_DOMAINS = ("limit", "global", "shape")


@dataclass(frozen=True)
class ShapeDifference:
    D: np.ndarray
    kind: str
    domain: str

    def __post_init__(self):
        D = np.asarray(self.D, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ShapeError(f"CSD must be square, got {D.shape}")
        if not np.isfinite(D).all():
            raise ContractError("CSD has non-finite entries")
        scale = max(1.0, float(np.abs(D).max()))
        if np.abs(D - D.T).max() > 1e-8 * scale:
            raise ContractError("CSD is not symmetric")
        if self.kind not in _KINDS:
            raise ContractError(f"kind must be one of {_KINDS}")
        if self.domain not in _DOMAINS:
            raise ContractError(f"domain must be one of {_DOMAINS}")
        object.__setattr__(self, "D", D)

    @property
    def size(self):
        return self.D.shape[0]


def _sym(M):
    return (M + M.T) / 2.0


def area_csd(lb, n):
    """Area-distortion CSD of shape ``n``: Y'Y on the limit domain."""
    Y = lb.factor(n)
    return ShapeDifference(D=_sym(Y.T @ Y), kind="area", domain="limit")


def conformal_csd(lb, n):
    """Conformal-distortion CSD: Lambda0^+ Y' diag(lam) Y, symmetrized."""
    Y = lb.factor(n)
    if n not in lb.lambdas:
        raise MissingShapeError(f"no eigenvalues recorded for {n!r}")
    lam = lb.lambdas[n]
    if len(lam) != Y.shape[0]:
        raise ShapeError(f"{n!r}: {len(lam)} eigenvalues for "
                         f"{Y.shape[0]} basis rows")
    core = Y.T @ (lam[:, None] * Y)
    inv0 = _pinv_diag(lb.Lambda0)
    return ShapeDifference(D=_sym(inv0[:, None] * core), kind="conformal",
                           domain="limit")


def _pinv_diag(values):
    values = np.asarray(values, dtype=np.float64)
    cutoff = np.abs(values).max() * 1e-12 if len(values) else 0.0
    out = np.zeros_like(values)
    keep = np.abs(values) > cutoff
    out[keep] = 1.0 / values[keep]
    return out


def pairwise_diff(lb, n, m, kind="area", ridge=1e-8):
    """Relative difference of shape ``m`` seen from shape ``n``.

    Functorial form Y_n D_n^-1 D_m Y_n^+, expressed on shape n's own
    spectral domain; the inverse is ridge-regularized.  For n == m this
    degenerates to the latent-span projector.
    """
    make = area_csd if kind == "area" else conformal_csd
    if kind not in _KINDS:
        raise ContractError(f"kind must be one of {_KINDS}")
    Dn = make(lb, n).D
    Dm = make(lb, m).D
    Yn = lb.factor(n)
    core = np.linalg.solve(Dn + ridge * np.eye(len(Dn)), Dm)
    D = Yn @ core @ np.linalg.pinv(Yn)
    return ShapeDifference(D=_sym(D), kind=kind, domain="shape")


@dataclass(frozen=True)
class VariabilityOperator:
    M: np.ndarray
    eigvals: np.ndarray     # descending
    eigvecs: np.ndarray     # columns, aligned with eigvals
    label: str

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        scale = max(1.0, float(np.abs(M).max()))
        if np.abs(M - M.T).max() > 1e-8 * scale:
            raise ContractError("variability operator is not symmetric")
        if np.any(np.diff(self.eigvals) > 1e-12 * scale):
            raise ContractError("spectrum must be sorted descending")

    @property
    def size(self):
        return self.M.shape[0]


def _operator(M, label):
    M = _sym(M)
    vals, vecs = np.linalg.eigh(M)
    order = np.argsort(vals)[::-1]
    return VariabilityOperator(M=M, eigvals=vals[order],
                               eigvecs=canonical_signs(vecs[:, order]),
                               label=label)


def variability_operator(diffs, pairing="all", labels=None, name=""):
    """Aggregate CSDs into a variability operator.

    ``pairing="all"`` sums (D_n - D_m)^2 over every ordered pair (the
    total-energy operator).  ``pairing="contrast"`` needs per-diff
    ``labels`` ``(group, member)`` and forms

        sum[same member, different group] - sum[same group, different member]

    so variation across groups at fixed member is rewarded and
    within-group variation is penalized.  Swapping the label axes flips
    which kind of change the top eigenfunctions highlight.
    """
    diffs = list(diffs)
    if not diffs:
        raise ContractError("no shape differences given")
    size = diffs[0].size
    domain = diffs[0].domain
    for d in diffs:
        if d.size != size or d.domain != domain:
            raise ContractError(
                f"mixed CSD domains: {d.size}/{d.domain} vs {size}/{domain}")
    mats = [d.D for d in diffs]

    if pairing == "all":
        M = np.zeros((size, size))
        for a in range(len(mats)):
            for b in range(len(mats)):
                if a == b:
                    continue
                R = mats[a] - mats[b]
                M += R @ R
        return _operator(M, name or "E")

    if pairing != "contrast":
        raise ContractError(f"unknown pairing {pairing!r}")
    if labels is None or len(labels) != len(diffs):
        raise ContractError("contrast pairing needs one (group, member) "
                            "label per difference")
    labels = [tuple(lb) for lb in labels]
    M = np.zeros((size, size))
    for a in range(len(mats)):
        for b in range(len(mats)):
            if a == b:
                continue
            ga, na = labels[a]
            gb, nb = labels[b]
            if na == nb and ga != gb:
                sign = 1.0
            elif ga == gb and na != nb:
                sign = -1.0
            else:
                continue
            R = mats[a] - mats[b]
            M += sign * (R @ R)
    return _operator(M, name or "H")


def combine_operators(a, b, name="combined"):
    """Trace-normalized sum of two operators (e.g. area + conformal).

    Falls back to Frobenius normalization when a trace is too close to
    zero to divide by (signed operators can have vanishing trace).
    """
    def normed(op):
        M = op.M
        t = abs(float(np.trace(M)))
        f = float(np.linalg.norm(M))
        if f == 0.0:
            raise ContractError(f"operator {op.label!r} is zero")
        return M / (t if t > 1e-9 * f else f)

    return _operator(normed(a) + normed(b), name)


def global_transfer(diff, glb, collection_id, one_sided=False):
    """Carry a limit-domain CSD into the global domain.

    Conjugation Z^+ D Z keeps the result a symmetric operator on the
    global domain.  ``one_sided=True`` instead returns the raw
    rectangular product Z^+ D (an ndarray, not a ShapeDifference), for
    cross-checking against the asymmetric convention.
    """
    if diff.domain != "limit":
        raise ContractError(f"transfer expects a limit-domain CSD, "
                            f"got {diff.domain!r}")
    Z = glb.factor(collection_id)
    if Z.shape[0] != diff.size:
        raise ShapeError(f"global factor expects k_l={Z.shape[0]}, "
                         f"CSD is {diff.size}")
    Zp = np.linalg.pinv(Z)
    if one_sided:
        return Zp @ diff.D
    return ShapeDifference(D=_sym(Zp @ diff.D @ Z), kind=diff.kind,
                           domain="global")


def distinctive_function(op, truncate_at):
    """Eigenvalue-weighted sum of the first ``truncate_at`` eigvecs."""
    if not 1 <= truncate_at <= op.size:
        raise ContractError(f"truncation index {truncate_at} outside "
                            f"[1, {op.size}]")
    t = int(truncate_at)
    return op.eigvecs[:, :t] @ op.eigvals[:t]


def to_vertex_field(latent_fn, basis, lb, collection_id=None, glb=None,
                    squared=True):
    """Reconstruct a latent/global-domain function on a shape's vertices.

    Routes through phi @ Y (limit functions) or phi @ Y @ Z (global
    functions, when ``glb``/``collection_id`` are given); returns
    squared per-vertex values by default, the form used for colormaps.
    """
    f = np.asarray(latent_fn, dtype=np.float64).ravel()
    Y = lb.factor(_field_id(basis))
    if len(f) == Y.shape[1]:
        coeffs = Y @ f
    elif glb is not None and collection_id is not None \
            and len(f) == glb.m:
        coeffs = Y @ (glb.factor(collection_id) @ f)
    else:
        raise ShapeError(f"function of length {len(f)} matches neither the "
                         "limit nor the global domain")
    field = basis.phi @ coeffs
    return field * field if squared else field


def _field_id(basis):
    if not basis.shape_id:
        raise MissingShapeError("basis has an empty shape_id; latent "
                                "factors are keyed by id")
    return basis.shape_id


def suggest_truncation(op, basis, lb, noise_mask, collection_id=None,
                       glb=None, threshold=0.5):
    """Heuristic truncation index: stop before the first eigenfunction
    whose vertex energy concentrates past ``threshold`` on known-noisy
    vertices (boundary / low-coverage), mirroring manual inspection."""
    noise_mask = np.asarray(noise_mask, dtype=bool)
    if noise_mask.shape != (basis.n,):
        raise ShapeError("noise mask length mismatch")
    if not noise_mask.any():
        return op.size
    for k in range(1, op.size + 1):
        field = to_vertex_field(op.eigvecs[:, k - 1], basis, lb,
                                collection_id=collection_id, glb=glb)
        total = float(field.sum())
        if total <= 0.0:
            continue
        if float(field[noise_mask].sum()) / total >= threshold:
            return max(1, k - 1)
    return op.size
