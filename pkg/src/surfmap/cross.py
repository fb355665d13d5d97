"""Matching across collections through their limit functional domains.

Each collection is summarised by its latent basis (one limit domain per
collection).  A second-level network couples the limit domains with
k_l x k_l functional maps obtained by lifting a single
representative-to-representative map through the latent factors.
Solving the same consistency problem once more, now under the Gram
constraint sum_i Z_i Z_i' = I, yields a global latent basis: per
collection a factor Z_id mapping a shared m-dimensional global domain
into that collection's limit domain.

Every vertex of every shape then gets global coordinates
zeta = phi @ Y @ Z (rows of an n x m matrix), and cross-collection
vertex maps reduce to nearest-neighbor queries between zeta rows.

Note the Gram constraint couples the blocks: it is only exactly
satisfiable when P*m >= k_l (P collections).  Below that the corrected
factors satisfy sum ZZ' = projector of rank P*m and a warning is
issued; the residual is reported either way.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import store
from .consistency import (_assemble_quadratic, _check_connected, _dirichlet_tiebreak,
                          _read_manifest, _write_manifest, load_latent,
                          save_latent)
from .errors import (ContractError, MissingShapeError, NumericError,
                     ShapeError)
from .fmap import FunctionalMap, PointMap
from .proximity import nearest_rows
from .spectral import canonical_signs


@dataclass(frozen=True)
class CCEdge:
    source: str
    target: str
    fmap: FunctionalMap     # limit_i -> limit_j, (k_l, k_l)
    omega: float

    def __post_init__(self):
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ContractError(f"edge confidence must be >= 0, "
                                f"got {self.omega}")


@dataclass(frozen=True)
class CCFMN:
    """Network whose nodes are collections' limit domains."""

    ids: tuple
    latents: dict           # collection id -> LatentBasis
    reps: dict              # collection id -> representative shape id
    edges: tuple

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("duplicate collection ids")
        k_l = self.k_l
        for cid in self.ids:
            if self.latents[cid].k_l != k_l:
                raise ShapeError("collections disagree on latent size: "
                                 f"{self.latents[cid].k_l} vs {k_l}")
            rep = self.reps[cid]
            if rep not in self.latents[cid].Y:
                raise MissingShapeError(
                    f"representative {rep!r} is not registered in "
                    f"collection {cid!r}")
        for edge in self.edges:
            for end in (edge.source, edge.target):
                if end not in self.latents:
                    raise MissingShapeError(f"edge endpoint {end!r} is not "
                                            "a collection")
            if edge.fmap.C.shape != (k_l, k_l):
                raise ShapeError(f"limit map on ({edge.source!r}, "
                                 f"{edge.target!r}) is {edge.fmap.C.shape}, "
                                 f"expected {(k_l, k_l)}")
        _check_connected(self.ids, [(e.source, e.target) for e in self.edges])

    @property
    def k_l(self):
        return self.latents[self.ids[0]].k_l


def limit_map(lb_i, lb_j, rep_map, rep_i=None, rep_j=None):
    """Lift a representative-pair map to a limit-to-limit map.

    ``rep_map`` transports rep_i -> rep_j coefficients; the
    representatives default to the map's declared endpoints.  The
    result conjugates through the latent factors:  Y_rep_j^+ C Y_rep_i.
    """
    rep_i = rep_i or rep_map.source_id
    rep_j = rep_j or rep_map.target_id
    if not rep_i or not rep_j:
        raise MissingShapeError("representative ids are neither declared "
                                "on the map nor given explicitly")
    Yi = lb_i.factor(rep_i)
    Yj = lb_j.factor(rep_j)
    if lb_i.k_l != lb_j.k_l:
        raise ShapeError(f"latent sizes differ: {lb_i.k_l} vs {lb_j.k_l}")
    if rep_map.C.shape != (Yj.shape[0], Yi.shape[0]):
        raise ShapeError(f"representative map is {rep_map.C.shape}, factors "
                         f"require {(Yj.shape[0], Yi.shape[0])}")
    C = np.linalg.pinv(Yj) @ rep_map.C @ Yi
    return FunctionalMap(C=C, source_id="", target_id="")


def build_ccfmn(collections, edges, default_omega=1.0):
    """Assemble the cross-collection network.

    ``collections``: list of ``(collection_id, LatentBasis,
    representative shape id)``.  ``edges``: tuples ``(i, j, fmap,
    omega)`` with ``fmap`` transporting limit_i -> limit_j (as produced
    by :func:`limit_map`); ``i``/``j`` are positions or collection ids.
    """
    ids = []
    latents = {}
    reps = {}
    for cid, lb, rep in collections:
        if cid in latents:
            raise ContractError(f"duplicate collection id {cid!r}")
        ids.append(cid)
        latents[cid] = lb
        reps[cid] = rep

    def resolve(end):
        if isinstance(end, str):
            if end not in latents:
                raise MissingShapeError(f"unknown collection id {end!r}")
            return end
        return ids[int(end)]

    built = []
    for entry in edges:
        i, j, fmap, omega = (tuple(entry) + (None,))[:4]
        i, j = resolve(i), resolve(j)
        if i == j:
            raise ContractError(f"self edge on collection {i!r}")
        if not isinstance(fmap, FunctionalMap):
            raise ContractError("cross-collection edges carry functional "
                                f"maps, got {type(fmap).__name__}")
        if fmap.source_id and fmap.source_id != i:
            raise ContractError(f"map on edge ({i!r}, {j!r}) declares "
                                f"source {fmap.source_id!r}")
        if fmap.target_id and fmap.target_id != j:
            raise ContractError(f"map on edge ({i!r}, {j!r}) declares "
                                f"target {fmap.target_id!r}")
        stamped = FunctionalMap(C=fmap.C, source_id=i, target_id=j)
        if omega is None:
            omega = float(default_omega)
        built.append(CCEdge(source=i, target=j, fmap=stamped,
                            omega=float(omega)))
    return CCFMN(ids=tuple(ids), latents=latents, reps=reps,
                 edges=tuple(built))


def cc_topology(ids, sizes=None, seed=0):
    """Default edge pairs: star around the largest collection plus a
    seeded tour for redundancy (duplicates dropped)."""
    ids = list(ids)
    if len(ids) < 2:
        return []
    if sizes is None:
        hub = ids[0]
    else:
        hub = ids[int(np.argmax(sizes))]
    pairs = [(hub, other) for other in ids if other != hub]
    seen = {frozenset(p) for p in pairs}
    order = list(np.random.default_rng(seed).permutation(len(ids)))
    tour = [ids[i] for i in order]
    for a, b in zip(tour, tour[1:] + tour[:1]):
        if frozenset((a, b)) not in seen:
            pairs.append((a, b))
            seen.add(frozenset((a, b)))
    return pairs


@dataclass(frozen=True)
class GlobalLatentBasis:
    """Per-collection factors of the shared global functional domain."""

    ids: tuple
    Z: dict                 # collection id -> (k_l, m)
    residual: float         # sum_ij w ||C Z_i - Z_j||_F^2 at the solution
    constraint: str

    def __post_init__(self):
        m = self.m
        for cid in self.ids:
            if cid not in self.Z:
                raise MissingShapeError(f"no factor for {cid!r}")
            if self.Z[cid].shape[1] != m:
                raise ShapeError("global factors disagree on m")

    @property
    def m(self):
        return self.Z[self.ids[0]].shape[1]

    def factor(self, collection_id):
        try:
            return self.Z[collection_id]
        except KeyError:
            raise MissingShapeError(f"{collection_id!r} is not registered "
                                    "in the global basis") from None

    def gram(self):
        k_l = self.Z[self.ids[0]].shape[0]
        S = np.zeros((k_l, k_l))
        for cid in self.ids:
            S += self.Z[cid] @ self.Z[cid].T
        return S


def compute_glb(ccfmn, m, constraint="gram"):
    """Global latent basis of a cross-collection network.

    ``constraint`` picks how the relaxed eigenvector solution is made
    feasible: ``"gram"`` enforces sum_i Z_i Z_i' = I by a pseudo-inverse
    square-root correction (rank-deficient when P*m < k_l, warned);
    ``"blockwise"`` orthonormalizes each block's columns instead.
    """
    k_l = ccfmn.k_l
    if not 1 <= m <= k_l:
        raise ContractError(f"global size {m} outside [1, {k_l}]")
    if constraint not in ("gram", "blockwise"):
        raise ContractError(f"unknown constraint {constraint!r}")
    ids = ccfmn.ids
    sizes = [k_l] * len(ids)
    terms = [(e.source, e.target, e.fmap.C, e.omega) for e in ccfmn.edges]
    Q, offs = _assemble_quadratic(ids, sizes, terms)
    Q = _dirichlet_tiebreak(
        Q, np.concatenate([np.abs(ccfmn.latents[c].Lambda0) for c in ids]))
    try:
        _, vecs = scipy.linalg.eigh(Q, subset_by_index=[0, m - 1])
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(f"global eigensolve failed: {exc}") from exc
    vecs = canonical_signs(vecs)
    Z = {cid: vecs[offs[i]:offs[i + 1]].copy() for i, cid in enumerate(ids)}

    if constraint == "gram":
        S = np.zeros((k_l, k_l))
        for cid in ids:
            S += Z[cid] @ Z[cid].T
        vals, U = scipy.linalg.eigh((S + S.T) / 2.0)
        # directions the factors barely reach are dropped, not inflated:
        # 1/sqrt of a noise-level eigenvalue would swamp the embedding
        tol = max(vals[-1], 0.0) * 1e-6
        keep = vals > tol
        if keep.sum() < k_l:
            warnings.warn(
                f"Gram constraint holds only on a rank-{int(keep.sum())} "
                f"subspace of the {k_l}-dim limit domain (need "
                f"{len(ids)}*{m} >= {k_l}); factors span a projector",
                RuntimeWarning, stacklevel=2)
        inv_sqrt = np.zeros_like(vals)
        inv_sqrt[keep] = 1.0 / np.sqrt(vals[keep])
        M = (U * inv_sqrt) @ U.T
        Z = {cid: M @ Z[cid] for cid in ids}
    else:
        for cid in ids:
            G = Z[cid].T @ Z[cid]
            vals, U = scipy.linalg.eigh((G + G.T) / 2.0)
            if vals[0] <= m * np.finfo(float).eps * max(vals[-1], 1.0):
                raise NumericError(f"factor for {cid!r} is column-rank "
                                   "deficient; blockwise constraint "
                                   "unavailable")
            M = (U / np.sqrt(vals)) @ U.T
            Z[cid] = Z[cid] @ M

    residual = 0.0
    for e in ccfmn.edges:
        r = e.fmap.C @ Z[e.source] - Z[e.target]
        residual += e.omega * float(np.sum(r * r))
    return GlobalLatentBasis(ids=tuple(ids), Z=Z, residual=residual,
                             constraint=constraint)


def extend_glb(glb, collection_id, edges):
    """Register one more collection against a frozen global basis.

    Re-solving the joint problem after new data arrives redistributes
    the new edges' noise over *every* factor, perturbing matches that
    were already made.  Extension instead solves only for the new
    collection's factor,

        min_Z  sum  w ||C Z_i - Z||^2  (+ terms with Z on the left),

    a closed-form SPD system; existing factors, embeddings and matches
    are untouched.  ``edges`` are (source, target, fmap, omega) with
    exactly one endpoint equal to ``collection_id`` and the other
    already registered.  The exact Gram identity is traded away: the
    returned basis keeps the old constraint label but its Gram picks up
    Z Z' of the new factor.
    """
    if collection_id in glb.Z:
        raise ContractError(f"{collection_id!r} is already registered")
    if not edges:
        raise ContractError("extension needs at least one edge")
    k_l = glb.Z[glb.ids[0]].shape[0]
    A = np.zeros((k_l, k_l))
    B = np.zeros((k_l, glb.m))
    extra = 0.0
    for src, tgt, fmap, omega in edges:
        omega = 1.0 if omega is None else float(omega)
        C = np.asarray(fmap.C, dtype=np.float64)
        if C.shape != (k_l, k_l):
            raise ShapeError(f"edge ({src!r}, {tgt!r}) map must be "
                             f"({k_l}, {k_l}), got {C.shape}")
        if (src == collection_id) == (tgt == collection_id):
            raise ContractError(f"edge ({src!r}, {tgt!r}) must connect "
                                f"{collection_id!r} to an existing "
                                "collection")
        if tgt == collection_id:
            other = glb.factor(src)
            A += omega * np.eye(k_l)         # ||C Z_src - Z||^2
            B += omega * (C @ other)
        else:
            other = glb.factor(tgt)
            A += omega * (C.T @ C)           # ||C Z - Z_tgt||^2
            B += omega * (C.T @ other)
    try:
        Z_new = scipy.linalg.solve(A, B, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"extension system is singular: {exc}") from exc
    for src, tgt, fmap, omega in edges:
        omega = 1.0 if omega is None else float(omega)
        zs = Z_new if src == collection_id else glb.factor(src)
        zt = Z_new if tgt == collection_id else glb.factor(tgt)
        r = fmap.C @ zs - zt
        extra += omega * float(np.sum(r * r))
    Z = dict(glb.Z)
    Z[collection_id] = Z_new
    return GlobalLatentBasis(ids=glb.ids + (collection_id,), Z=Z,
                             residual=glb.residual + extra,
                             constraint=glb.constraint)


def global_embed(basis, lb, glb, collection_id):
    """Per-vertex global coordinates zeta = phi @ Y @ Z (n x m)."""
    Y = lb.factor(_basis_id(basis))
    Z = glb.factor(collection_id)
    if Y.shape[1] != Z.shape[0]:
        raise ShapeError(f"latent factor has {Y.shape[1]} columns, global "
                         f"factor expects {Z.shape[0]}")
    return basis.phi @ (Y @ Z)


def _basis_id(basis):
    if not basis.shape_id:
        raise MissingShapeError("basis has an empty shape_id; latent "
                                "factors are keyed by id")
    return basis.shape_id


def cross_p2p(zeta_source, zeta_target, source_id="", target_id="",
              mask_source=None, mask_target=None):
    """Vertex map between globally embedded shapes (row NN queries).

    Masks (True = usable) exclude vertices: masked target rows never
    receive matches, masked source rows map to -1.
    """
    zeta_source = np.asarray(zeta_source, dtype=np.float64)
    zeta_target = np.asarray(zeta_target, dtype=np.float64)
    if zeta_source.ndim != 2 or zeta_target.ndim != 2 \
            or zeta_source.shape[1] != zeta_target.shape[1]:
        raise ShapeError("embeddings must be 2-d with matching width")
    rows_t = np.arange(len(zeta_target))
    ref = zeta_target
    if mask_target is not None:
        mask_target = np.asarray(mask_target, dtype=bool)
        if mask_target.shape != (len(zeta_target),):
            raise ShapeError("target mask length mismatch")
        if not mask_target.any():
            raise ContractError("target mask excludes every vertex")
        ref = zeta_target[mask_target]
        rows_t = rows_t[mask_target]
    assignments = np.full(len(zeta_source), -1, dtype=np.int64)
    take = np.ones(len(zeta_source), dtype=bool)
    if mask_source is not None:
        take = np.asarray(mask_source, dtype=bool)
        if take.shape != (len(zeta_source),):
            raise ShapeError("source mask length mismatch")
    if take.any():
        idx, _ = nearest_rows(ref, zeta_source[take])
        assignments[take] = rows_t[idx]
    return PointMap(assignments=assignments, n_target=len(zeta_target),
                    source_id=source_id, target_id=target_id)


# ------------------------------------------------------------ persistence

def save_ccfmn(directory, ccfmn):
    os.makedirs(directory, exist_ok=True)
    nodes = []
    for i, cid in enumerate(ccfmn.ids):
        sub = f"latent_{i}"
        save_latent(os.path.join(directory, sub), ccfmn.latents[cid])
        nodes.append({"id": cid, "latent": sub, "rep": ccfmn.reps[cid]})
    edges = []
    for i, edge in enumerate(ccfmn.edges):
        fname = f"map_{i}.bin"
        store.save_fmap(os.path.join(directory, fname), edge.fmap)
        edges.append({"source": edge.source, "target": edge.target,
                      "omega": edge.omega, "map": fname})
    _write_manifest(directory, {"kind": "ccfmn", "nodes": nodes,
                                "edges": edges})
    return directory


def load_ccfmn(directory):
    manifest = _read_manifest(directory, "ccfmn")
    collections = []
    for node in manifest["nodes"]:
        lb = load_latent(os.path.join(directory, node["latent"]))
        collections.append((node["id"], lb, node["rep"]))
    edges = []
    for entry in manifest["edges"]:
        fmap = store.load_fmap(os.path.join(directory, entry["map"]))
        edges.append((entry["source"], entry["target"], fmap,
                      float(entry["omega"])))
    return build_ccfmn(collections, edges)


def save_glb(directory, glb):
    os.makedirs(directory, exist_ok=True)
    arrays = {f"Z_{i}": glb.Z[cid] for i, cid in enumerate(glb.ids)}
    store.write_arrays(os.path.join(directory, "global.bin"),
                       {"kind": "global_arrays"}, arrays)
    _write_manifest(directory, {
        "kind": "global_latent_basis", "ids": list(glb.ids), "m": glb.m,
        "residual": glb.residual, "constraint": glb.constraint,
        "arrays": "global.bin",
    })
    return directory


def load_glb(directory):
    manifest = _read_manifest(directory, "global_latent_basis")
    _, arrays = store.read_arrays(
        os.path.join(directory, manifest["arrays"]))
    ids = tuple(manifest["ids"])
    Z = {cid: arrays[f"Z_{i}"] for i, cid in enumerate(ids)}
    return GlobalLatentBasis(ids=ids, Z=Z,
                             residual=float(manifest["residual"]),
                             constraint=manifest["constraint"])
