"""Functional-map networks over one collection and their latent bases.

A network (FMN) couples the spectral bases of a shape collection with
directed functional maps and per-edge confidences.  Solving

    min_Y  sum_ij  w_ij ||C_ij Y_i - Y_j||_F^2   s.t.  Y'Y = I

over the stacked factors Y = [Y_1; ...; Y_P] distils the network into a
latent basis: each Y_i maps a shared k_l-dimensional "limit" functional
domain into shape i's spectral domain.  The minimiser is the span of
the k_l smallest eigenvectors of the quadratic form's block matrix; the
gauge inside that span is pinned by rotating so that
sum_i Y_i' diag(lam_i) Y_i comes out diagonal with ascending entries
(the latent domain then has a well-defined Dirichlet spectrum, exposed
as ``Lambda0``).

Edge orientation: the edge (i, j) carries the map transporting
coefficients i -> j.  The vertex map that induces it via
:func:`surfmap.fmap.fmap_from_p2p` runs the opposite way, from shape j
onto shape i.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import store
from .errors import (ContractError, FormatError, MissingShapeError,
                     NumericError, ShapeError)
from .fmap import FunctionalMap, PointMap, fmap_from_p2p
from .proximity import nearest_rows
from .spectral import canonical_signs


@dataclass(frozen=True)
class FMNEdge:
    source: str
    target: str
    fmap: FunctionalMap     # transports source -> target coefficients
    omega: float

    def __post_init__(self):
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ContractError(f"edge confidence must be >= 0, "
                                f"got {self.omega}")


@dataclass(frozen=True)
class FMN:
    """Shape network: spectral bases on nodes, functional maps on edges."""

    ids: tuple
    bases: dict
    edges: tuple

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("duplicate shape ids in network")
        for edge in self.edges:
            for end in (edge.source, edge.target):
                if end not in self.bases:
                    raise MissingShapeError(f"edge endpoint {end!r} is not "
                                            "a network node")
            C = edge.fmap.C
            want = (self.bases[edge.target].k, self.bases[edge.source].k)
            if C.shape != want:
                raise ShapeError(
                    f"map on edge ({edge.source!r}, {edge.target!r}) is "
                    f"{C.shape}, node bases require {want}")
        _check_connected(self.ids, [(e.source, e.target) for e in self.edges])

    @property
    def n_nodes(self):
        return len(self.ids)


def _check_connected(ids, pairs):
    index = {s: i for i, s in enumerate(ids)}
    parent = list(range(len(ids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s, t in pairs:
        ra, rb = find(index[s]), find(index[t])
        if ra != rb:
            parent[ra] = rb
    roots = {}
    for s in ids:
        roots.setdefault(find(index[s]), []).append(s)
    if len(roots) > 1:
        parts = " / ".join("[" + ", ".join(map(str, v)) + "]"
                           for v in roots.values())
        raise ContractError(f"network is disconnected: {parts}")


def build_fmn(shapes, edges, default_omega=1.0):
    """Assemble a validated network.

    ``shapes``: list of ``(TriMesh or None, SpectralBasis)``.  Node ids
    come from ``basis.shape_id`` (falling back to the list position).
    ``edges``: tuples ``(i, j, map, omega)`` where ``i``/``j`` are
    positions or ids and ``map`` is a :class:`FunctionalMap`
    transporting i -> j, or the :class:`PointMap` from shape j onto
    shape i that induces one.  ``omega=None`` picks ``default_omega``;
    passing ``default_omega="coverage"`` uses each point map's unmasked
    fraction instead.
    """
    ids = []
    bases = {}
    for pos, (mesh, basis) in enumerate(shapes):
        sid = basis.shape_id or str(pos)
        if sid in bases:
            raise ContractError(f"duplicate shape id {sid!r}")
        if mesh is not None and mesh.n_vertices != basis.n:
            raise ShapeError(f"shape {sid!r}: mesh has {mesh.n_vertices} "
                             f"vertices, basis has {basis.n}")
        ids.append(sid)
        bases[sid] = basis

    def resolve(end):
        if isinstance(end, str):
            if end not in bases:
                raise MissingShapeError(f"unknown shape id {end!r}")
            return end
        return ids[int(end)]

    built = []
    for entry in edges:
        i, j, mapping, omega = (tuple(entry) + (None,))[:4]
        i, j = resolve(i), resolve(j)
        if i == j:
            raise ContractError(f"self edge on {i!r}")
        if isinstance(mapping, PointMap):
            # edge (i, j) needs the vertex map j -> i (pullback duality)
            if mapping.source_id and mapping.source_id != j:
                raise ContractError(
                    f"edge ({i!r}, {j!r}) expects a point map from {j!r} "
                    f"onto {i!r}, got one from {mapping.source_id!r}")
            if mapping.target_id and mapping.target_id != i:
                raise ContractError(
                    f"edge ({i!r}, {j!r}) expects a point map onto {i!r}, "
                    f"got one onto {mapping.target_id!r}")
            fmap = fmap_from_p2p(mapping, bases[j], bases[i])
            if not fmap.source_id:
                fmap = FunctionalMap(C=fmap.C, source_id=i, target_id=j)
            if omega is None and default_omega == "coverage":
                omega = mapping.coverage
        elif isinstance(mapping, FunctionalMap):
            if mapping.source_id and mapping.source_id != i:
                raise ContractError(f"map on edge ({i!r}, {j!r}) declares "
                                    f"source {mapping.source_id!r}")
            if mapping.target_id and mapping.target_id != j:
                raise ContractError(f"map on edge ({i!r}, {j!r}) declares "
                                    f"target {mapping.target_id!r}")
            fmap = FunctionalMap(C=mapping.C, source_id=i, target_id=j)
        else:
            raise ContractError("edge map must be a PointMap or a "
                                f"FunctionalMap, got {type(mapping).__name__}")
        if omega is None:
            omega = 1.0 if default_omega == "coverage" else float(default_omega)
        built.append(FMNEdge(source=i, target=j, fmap=fmap, omega=float(omega)))
    return FMN(ids=tuple(ids), bases=bases, edges=tuple(built))


@dataclass(frozen=True)
class LatentBasis:
    """Per-shape factors of a collection's limit functional domain."""

    ids: tuple
    Y: dict                 # id -> (k_i, k_l)
    lambdas: dict           # id -> (k_i,) basis eigenvalues
    Lambda0: np.ndarray     # (k_l,) latent spectrum, ascending

    def __post_init__(self):
        k_l = len(self.Lambda0)
        for sid in self.ids:
            if sid not in self.Y:
                raise MissingShapeError(f"no factor for {sid!r}")
            if self.Y[sid].shape[1] != k_l:
                raise ShapeError(f"factor for {sid!r} has "
                                 f"{self.Y[sid].shape[1]} columns, "
                                 f"latent size is {k_l}")

    @property
    def k_l(self):
        return len(self.Lambda0)

    def factor(self, shape_id):
        try:
            return self.Y[shape_id]
        except KeyError:
            raise MissingShapeError(
                f"{shape_id!r} is not registered in the latent basis") from None

    def with_node(self, shape_id, Y_new, lam=None):
        """Copy with one more registered shape (see :func:`extend_latent`)."""
        if shape_id in self.Y:
            raise ContractError(f"{shape_id!r} already registered")
        Y_new = np.asarray(Y_new, dtype=np.float64)
        if Y_new.ndim != 2 or Y_new.shape[1] != self.k_l:
            raise ShapeError("new factor must have k_l columns")
        Y = dict(self.Y)
        Y[shape_id] = Y_new
        lambdas = dict(self.lambdas)
        if lam is not None:
            lambdas[shape_id] = np.asarray(lam, dtype=np.float64)
        return LatentBasis(ids=self.ids + (shape_id,), Y=Y,
                           lambdas=lambdas, Lambda0=self.Lambda0)


def _edge_weight(edge, roi_edges):
    # ROI-supported constraints count double
    if (edge.source, edge.target) in roi_edges:
        return 2.0 * edge.omega
    return edge.omega


def _assemble_quadratic(ids, sizes, terms):
    """Block matrix of sum_ij w ||C_ij X_i - X_j||^2 over stacked X."""
    offs = np.concatenate([[0], np.cumsum(sizes)])
    index = {s: i for i, s in enumerate(ids)}
    Q = np.zeros((offs[-1], offs[-1]))

    def block(a, b):
        return (slice(offs[a], offs[a + 1]), slice(offs[b], offs[b + 1]))

    for source, target, C, w in terms:
        if w == 0.0:
            continue
        i, j = index[source], index[target]
        Q[block(i, i)] += w * (C.T @ C)
        Q[block(j, j)] += w * np.eye(sizes[j])
        Q[block(i, j)] -= w * C.T
        Q[block(j, i)] -= w * C
    return (Q + Q.T) / 2.0, offs


def map_laplacian(fmn, roi_edges=()):
    """Block matrix of the network's consistency quadratic form."""
    roi_edges = set(roi_edges)
    sizes = [fmn.bases[s].k for s in fmn.ids]
    terms = [(e.source, e.target, e.fmap.C, _edge_weight(e, roi_edges))
             for e in fmn.edges]
    return _assemble_quadratic(fmn.ids, sizes, terms)


def _dirichlet_tiebreak(Q, lam_stacked, eps=1e-6):
    """Perturb the quadratic form toward low-frequency solutions.

    Exactly consistent networks leave the form with a null space far
    larger than k_l, so "the smallest eigenvectors" would be an
    arbitrary (and unstable) subspace.  A relatively tiny multiple of
    the stacked basis eigenvalues on the diagonal resolves every such
    tie toward the lowest Dirichlet energy without disturbing
    genuinely-constrained solutions.
    """
    lam_max = float(lam_stacked.max()) if len(lam_stacked) else 0.0
    if lam_max <= 0.0:
        return Q
    scale = max(1.0, float(np.abs(Q).sum(axis=1).max()))
    Q = Q.copy()
    Q[np.diag_indices_from(Q)] += (eps * scale / lam_max) * lam_stacked
    return Q


def compute_cclb(fmn, k_l, roi_edges=()):
    """Latent basis of a network, canonically rotated.

    ``roi_edges`` marks (source, target) pairs whose constraints carry
    doubled weight, used to focus consistency on maps supported on a
    region of interest.
    """
    k_min = min(fmn.bases[s].k for s in fmn.ids)
    if not 1 <= k_l <= k_min:
        raise ContractError(f"latent size {k_l} outside [1, {k_min}] "
                            "(smallest node basis)")
    Q, offs = map_laplacian(fmn, roi_edges)
    Q = _dirichlet_tiebreak(
        Q, np.concatenate([fmn.bases[s].lam for s in fmn.ids]))
    try:
        _, vecs = scipy.linalg.eigh(Q, subset_by_index=[0, k_l - 1])
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(f"latent eigensolve failed: {exc}") from exc

    blocks = {s: vecs[offs[i]:offs[i + 1]] for i, s in enumerate(fmn.ids)}
    lambdas = {s: fmn.bases[s].lam.copy() for s in fmn.ids}
    Lambda0, rot = _canonical_rotation(fmn.ids, blocks, lambdas)
    stacked = canonical_signs(vecs @ rot)
    Y = {s: stacked[offs[i]:offs[i + 1]].copy()
         for i, s in enumerate(fmn.ids)}
    return LatentBasis(ids=tuple(fmn.ids), Y=Y, lambdas=lambdas,
                       Lambda0=Lambda0)


def _canonical_rotation(ids, blocks, lambdas):
    """Rotation diagonalizing the latent Dirichlet form, ascending."""
    k_l = next(iter(blocks.values())).shape[1]
    L0 = np.zeros((k_l, k_l))
    for s in ids:
        L0 += blocks[s].T @ (lambdas[s][:, None] * blocks[s])
    L0 = (L0 + L0.T) / 2.0
    try:
        vals, rot = scipy.linalg.eigh(L0)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(f"latent spectrum eigensolve failed: {exc}") \
            from exc
    return vals, rot


def consistent_fmap(lb, i, j):
    """Map i -> j factored through the latent domain (Y_j Y_i^+)."""
    Yi, Yj = lb.factor(i), lb.factor(j)
    C = Yj @ np.linalg.pinv(Yi)
    return FunctionalMap(C=C, source_id=i, target_id=j)


def consistent_p2p(lb, basis_i, basis_j, mask_source=None, mask_target=None):
    """Vertex map i -> j by matching latent-aligned embedding rows.

    Masks (boolean, True = usable) exclude vertices of partial shapes:
    masked target vertices never receive matches, masked source
    vertices come back as -1.
    """
    Yi = lb.factor(_require_id(basis_i))
    Yj = lb.factor(_require_id(basis_j))
    emb_i = basis_i.phi @ Yi
    emb_j = basis_j.phi @ Yj
    rows_j = np.arange(basis_j.n)
    if mask_target is not None:
        mask_target = np.asarray(mask_target, dtype=bool)
        if mask_target.shape != (basis_j.n,):
            raise ShapeError("target mask length mismatch")
        if not mask_target.any():
            raise ContractError("target mask excludes every vertex")
        emb_j = emb_j[mask_target]
        rows_j = rows_j[mask_target]
    assignments = np.full(basis_i.n, -1, dtype=np.int64)
    take = np.ones(basis_i.n, dtype=bool)
    if mask_source is not None:
        take = np.asarray(mask_source, dtype=bool)
        if take.shape != (basis_i.n,):
            raise ShapeError("source mask length mismatch")
    if take.any():
        idx, _ = nearest_rows(emb_j, emb_i[take])
        assignments[take] = rows_j[idx]
    return PointMap(assignments=assignments, n_target=basis_j.n,
                    source_id=basis_i.shape_id, target_id=basis_j.shape_id)


def _require_id(basis):
    if not basis.shape_id:
        raise MissingShapeError("basis has an empty shape_id; latent "
                                "factors are keyed by id")
    return basis.shape_id


def extend_latent(lb, i, fmap_ik):
    """Push the latent factor of node i through a map to a new shape.

    ``fmap_ik`` transports i -> k; the new factor is C_ik Y_i.  Returns
    the factor only — register it with :meth:`LatentBasis.with_node`.
    """
    Yi = lb.factor(i)
    if fmap_ik.source_id and fmap_ik.source_id != i:
        raise ContractError(f"map declares source {fmap_ik.source_id!r}, "
                            f"expected {i!r}")
    if fmap_ik.k_source != Yi.shape[0]:
        raise ShapeError(f"map expects a {fmap_ik.k_source}-dim source "
                         f"basis, factor for {i!r} has {Yi.shape[0]} rows")
    return fmap_ik.C @ Yi


def cycle_residual(fmn, lb, roi_edges=()):
    """Mean per-edge consistency energy of the network under ``lb``."""
    if not fmn.edges:
        return 0.0
    roi_edges = set(roi_edges)
    total = 0.0
    for edge in fmn.edges:
        Yi, Yj = lb.factor(edge.source), lb.factor(edge.target)
        r = edge.fmap.C @ Yi - Yj
        total += _edge_weight(edge, roi_edges) * float(np.sum(r * r))
    return total / len(fmn.edges)


# ------------------------------------------------------------ persistence
#
# Networks and latent bases live in a directory: a manifest.json plus
# binary containers, so the matrices stay exact and the topology stays
# readable.

def save_fmn(directory, fmn):
    os.makedirs(directory, exist_ok=True)
    nodes = []
    for i, sid in enumerate(fmn.ids):
        fname = f"basis_{i}.bin"
        store.save_basis(os.path.join(directory, fname), fmn.bases[sid])
        nodes.append({"id": sid, "basis": fname})
    edges = []
    for i, edge in enumerate(fmn.edges):
        fname = f"map_{i}.bin"
        store.save_fmap(os.path.join(directory, fname), edge.fmap)
        edges.append({"source": edge.source, "target": edge.target,
                      "omega": edge.omega, "map": fname})
    manifest = {"kind": "fmn", "nodes": nodes, "edges": edges}
    _write_manifest(directory, manifest)
    return directory


def load_fmn(directory):
    manifest = _read_manifest(directory, "fmn")
    ids = []
    bases = {}
    for node in manifest["nodes"]:
        basis = store.load_basis(os.path.join(directory, node["basis"]))
        ids.append(node["id"])
        bases[node["id"]] = basis
    edges = []
    for entry in manifest["edges"]:
        fmap = store.load_fmap(os.path.join(directory, entry["map"]))
        edges.append(FMNEdge(source=entry["source"], target=entry["target"],
                             fmap=fmap, omega=float(entry["omega"])))
    return FMN(ids=tuple(ids), bases=bases, edges=tuple(edges))


def save_latent(directory, lb):
    os.makedirs(directory, exist_ok=True)
    arrays = {"Lambda0": lb.Lambda0}
    for i, sid in enumerate(lb.ids):
        arrays[f"Y_{i}"] = lb.Y[sid]
        if sid in lb.lambdas:
            arrays[f"lam_{i}"] = lb.lambdas[sid]
    store.write_arrays(os.path.join(directory, "latent.bin"),
                       {"kind": "latent_arrays"}, arrays)
    manifest = {"kind": "latent_basis", "k_l": lb.k_l,
                "ids": list(lb.ids), "arrays": "latent.bin"}
    _write_manifest(directory, manifest)
    return directory


def load_latent(directory):
    manifest = _read_manifest(directory, "latent_basis")
    _, arrays = store.read_arrays(
        os.path.join(directory, manifest["arrays"]))
    ids = tuple(manifest["ids"])
    Y = {}
    lambdas = {}
    for i, sid in enumerate(ids):
        Y[sid] = arrays[f"Y_{i}"]
        if f"lam_{i}" in arrays:
            lambdas[sid] = arrays[f"lam_{i}"]
    return LatentBasis(ids=ids, Y=Y, lambdas=lambdas,
                       Lambda0=arrays["Lambda0"])


def _write_manifest(directory, manifest):
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(directory, kind):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest: {exc}", path) from exc
    except ValueError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", path) from exc
    if manifest.get("kind") != kind:
        raise FormatError(f"directory holds {manifest.get('kind')!r}, "
                          f"expected {kind!r}", path)
    return manifest
