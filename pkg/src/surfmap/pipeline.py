"""Staged pipeline over a dataset manifest.

Each stage is a pure function of (manifest, config, prior artifacts)
and ends by writing a ``stage.json`` recording the checksums of its
inputs and outputs.  Re-running a stage with unchanged inputs rewrites
identical bytes; running a stage whose prerequisites are missing raises
:class:`DependencyError`, and prerequisites whose recorded checksums no
longer match the files on disk raise :class:`StaleArtifactError`.
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .consistency import (
    build_fmn,
    compute_cclb,
    consistent_p2p,
    load_latent,
    save_latent,
)
from .cross import (
    build_ccfmn,
    cc_topology,
    compute_glb,
    limit_map,
    load_glb,
    save_ccfmn,
    save_glb,
)
from .errors import (
    ContractError,
    DependencyError,
    StaleArtifactError,
)
from .extrinsic import (
    BandOffsets,
    RigidTransform,
    build_roi_band,
    close_roi,
    displacement_field,
    project_roi,
    rigid_from_correspondences,
    transfer_roi,
    trimmed_icp,
    volume_change,
)
from .fmap import nn_init, zoomout_refine
from .mesh import clean_mesh, cotangent_laplacian, decimate, signed_volume
from .meshio import load_mesh, save_mesh
from .shapediff import (
    area_csd,
    conformal_csd,
    distinctive_function,
    global_transfer,
    suggest_truncation,
    to_vertex_field,
    variability_operator,
)
from .spectral import eigenbasis
from .store import file_sha256, load_basis, load_fmap, load_pointmap, \
    save_basis, save_fmap, save_pointmap
from .synth import SynthSpec, generate_dataset, load_manifest, write_dataset

STAGES = (
    "synth", "preprocess", "spectral", "match", "refine",
    "cross", "intrinsic", "extrinsic", "report",
)
_PREREQS = {
    "synth": (),
    "preprocess": (),
    "spectral": ("preprocess",),
    "match": ("preprocess",),
    "refine": ("spectral", "match"),
    "cross": ("spectral", "refine"),
    "intrinsic": ("spectral", "cross"),
    "extrinsic": ("preprocess", "spectral", "refine", "cross"),
    "report": ("extrinsic",),
}


# --------------------------------------------------------- bookkeeping

def _hash_obj(text):
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()


def _input_hashes(out_dir, stage, manifest_path, config):
    h = {
        "manifest": file_sha256(manifest_path),
        "config": _hash_obj(config.to_json()),
    }
    for pre in _PREREQS[stage]:
        marker = Path(out_dir) / pre / "stage.json"
        if not marker.exists():
            raise DependencyError(
                f"stage {stage!r} needs {pre!r}, which has not run",
                stage=pre,
            )
        h[pre] = file_sha256(marker)
    return h


def _verify_stage(out_dir, stage, manifest_path, config):
    """Check a completed stage's record against the disk."""
    marker = Path(out_dir) / stage / "stage.json"
    if not marker.exists():
        raise DependencyError(f"stage {stage!r} has not run", stage=stage)
    rec = json.loads(marker.read_text())
    want = _input_hashes(out_dir, stage, manifest_path, config)
    if rec.get("inputs") != want:
        raise StaleArtifactError(
            f"stage {stage!r} ran against different inputs; re-run it",
            stage=stage,
        )
    for rel, sha in rec.get("outputs", {}).items():
        f = Path(out_dir) / stage / rel
        if not f.exists() or file_sha256(f) != sha:
            raise StaleArtifactError(
                f"artifact {rel!r} of stage {stage!r} is missing or modified",
                stage=stage,
            )


def _finish_stage(out_dir, stage, inputs, files):
    sdir = Path(out_dir) / stage
    outputs = {
        str(f.relative_to(sdir)): file_sha256(f) for f in sorted(files)
    }
    record = {"stage": stage, "inputs": inputs, "outputs": outputs}
    tmp = sdir / "stage.json.tmp"
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, sdir / "stage.json")
    return sdir / "stage.json"


def _saved_files(directory):
    return [p for p in Path(directory).rglob("*") if p.is_file()]


def _map_jobs(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


class _Tree:
    """Lazy handles to one dataset run: manifest rows and artifacts."""

    def __init__(self, manifest_path, config, out_dir):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.doc = load_manifest(manifest_path)
        self.config = config
        self.out = Path(out_dir)

    def collections(self):
        return self.doc["collections"]

    def shape_ids(self, col):
        cid = col["id"]
        return [f"{cid}:CT"] + [f"{cid}:{s['label']}" for s in col["sessions"]]

    def mesh_path(self, col, label):
        if label == "CT":
            return self.root / col["ct"]
        for s in col["sessions"]:
            if s["label"] == label:
                return self.root / s["mesh"]
        raise ContractError(f"no session {label!r} in {col['id']!r}")

    def gt(self, col):
        return json.loads((self.root / col["ground_truth"]).read_text())

    def clean(self, sid):
        cid, label = sid.split(":")
        return load_mesh(self.out / "preprocess" / cid / f"{label}.ply")

    def basis(self, sid):
        cid, label = sid.split(":")
        return load_basis(self.out / "spectral" / cid / f"{label}.basis")

    def pose(self, col, label):
        p = self.gt(col)["sessions"][label]["pose"]
        return RigidTransform(
            rotation=np.asarray(p["rotation"], float),
            translation=np.asarray(p["translation"], float),
        )


# -------------------------------------------------------------- stages

def _stage_preprocess(tree, jobs):
    cfg = tree.config
    files = []
    for col in tree.collections():
        cid = col["id"]
        cdir = tree.out / "preprocess" / cid
        cdir.mkdir(parents=True, exist_ok=True)

        def one(label):
            mesh = clean_mesh(load_mesh(tree.mesh_path(col, label)))
            if mesh.n_vertices > cfg.decimate_target:
                mesh = decimate(mesh, cfg.decimate_target)
            path = cdir / f"{label}.ply"
            save_mesh(mesh, path)
            return path

        labels = ["CT"] + [s["label"] for s in col["sessions"]]
        files += _map_jobs(one, labels, jobs)
    return files


def _stage_spectral(tree, jobs):
    cfg = tree.config
    files = []
    for col in tree.collections():
        cid = col["id"]
        cdir = tree.out / "spectral" / cid
        cdir.mkdir(parents=True, exist_ok=True)

        def one(label):
            sid = f"{cid}:{label}"
            basis = eigenbasis(
                cotangent_laplacian(tree.clean(sid)), cfg.k, shape_id=sid
            )
            path = cdir / f"{label}.basis"
            save_basis(path, basis)
            return path

        labels = ["CT"] + [s["label"] for s in col["sessions"]]
        files += _map_jobs(one, labels, jobs)
    return files


def _session_chain(col):
    labels = [s["label"] for s in col["sessions"]]
    return list(zip(labels, labels[1:]))


def _stage_match(tree, jobs):
    cfg = tree.config
    files = []
    for col in tree.collections():
        cid = col["id"]
        cdir = tree.out / "match" / cid
        cdir.mkdir(parents=True, exist_ok=True)
        ct = tree.clean(f"{cid}:CT")

        def to_ct(label):
            scan = tree.clean(f"{cid}:{label}")
            pm = nn_init(
                scan, ct,
                transform=tree.pose(col, label).inverse(),
                max_distance=cfg.nn_max_distance,
                source_id=f"{cid}:{label}", target_id=f"{cid}:CT",
            )
            path = cdir / f"{label}.pmap"
            save_pointmap(path, pm)
            return path

        labels = [s["label"] for s in col["sessions"]]
        files += _map_jobs(to_ct, labels, jobs)

        def chain(pair):
            a, b = pair
            pa, pb = tree.pose(col, a), tree.pose(col, b)
            pm = nn_init(
                tree.clean(f"{cid}:{a}"), tree.clean(f"{cid}:{b}"),
                transform=pb.compose(pa.inverse()),
                max_distance=cfg.nn_max_distance,
                source_id=f"{cid}:{a}", target_id=f"{cid}:{b}",
            )
            path = cdir / f"{a}__{b}.pmap"
            save_pointmap(path, pm)
            return path

        files += _map_jobs(chain, _session_chain(col), jobs)

    # representatives across collections, unposed CT to unposed CT
    pdir = tree.out / "match" / "pairs"
    pdir.mkdir(parents=True, exist_ok=True)
    ids = [c["id"] for c in tree.collections()]
    sizes = [len(c["sessions"]) + 1 for c in tree.collections()]

    def rep(pair):
        ci, cj = pair
        pm = nn_init(
            tree.clean(f"{cj}:CT"), tree.clean(f"{ci}:CT"),
            source_id=f"{cj}:CT", target_id=f"{ci}:CT",
        )
        path = pdir / f"{ci}__{cj}.pmap"
        save_pointmap(path, pm)
        return path

    files += _map_jobs(rep, cc_topology(ids, sizes=sizes), jobs)
    return files


def _stage_refine(tree, jobs):
    cfg = tree.config
    start, end, step = cfg.zoomout
    files = []

    def refine_one(task):
        src_dir, name, src_id, tgt_id = task
        pm0 = load_pointmap(tree.out / "match" / src_dir / f"{name}.pmap")
        zr = zoomout_refine(
            pm0, tree.basis(src_id), tree.basis(tgt_id),
            k_start=start, k_end=end, step=step,
        )
        rdir = tree.out / "refine" / src_dir
        rdir.mkdir(parents=True, exist_ok=True)
        p1 = rdir / f"{name}.pmap"
        p2 = rdir / f"{name}.fmap"
        save_pointmap(p1, zr.pointmap)
        save_fmap(p2, zr.fmap)
        return [p1, p2]

    tasks = []
    for col in tree.collections():
        cid = col["id"]
        for s in col["sessions"]:
            tasks.append((cid, s["label"], f"{cid}:{s['label']}", f"{cid}:CT"))
        for a, b in _session_chain(col):
            tasks.append((cid, f"{a}__{b}", f"{cid}:{a}", f"{cid}:{b}"))
    ids = [c["id"] for c in tree.collections()]
    sizes = [len(c["sessions"]) + 1 for c in tree.collections()]
    for ci, cj in cc_topology(ids, sizes=sizes):
        tasks.append(("pairs", f"{ci}__{cj}", f"{cj}:CT", f"{ci}:CT"))

    for batch in _map_jobs(refine_one, tasks, jobs):
        files += batch
    return files


def _stage_cross(tree, jobs):
    cfg = tree.config
    files = []
    latents = {}
    for col in tree.collections():
        cid = col["id"]
        ct_id = f"{cid}:CT"
        shapes = [(tree.clean(ct_id), tree.basis(ct_id))]
        edges = []
        for s in col["sessions"]:
            sid = f"{cid}:{s['label']}"
            shapes.append((tree.clean(sid), tree.basis(sid)))
            pm = load_pointmap(
                tree.out / "refine" / cid / f"{s['label']}.pmap"
            )
            edges.append((ct_id, sid, pm, None))
        for a, b in _session_chain(col):
            pm = load_pointmap(tree.out / "refine" / cid / f"{a}__{b}.pmap")
            edges.append((f"{cid}:{b}", f"{cid}:{a}", pm, None))
        lb = compute_cclb(build_fmn(shapes, edges), cfg.k_l)
        latents[cid] = lb
        files += _saved_files(
            save_latent(tree.out / "cross" / cid / "latent", lb)
        )

    ids = [c["id"] for c in tree.collections()]
    sizes = [len(c["sessions"]) + 1 for c in tree.collections()]
    cc_edges = []
    for ci, cj in cc_topology(ids, sizes=sizes):
        F = load_fmap(tree.out / "refine" / "pairs" / f"{ci}__{cj}.fmap")
        lm = limit_map(
            latents[ci], latents[cj], F,
            rep_i=f"{ci}:CT", rep_j=f"{cj}:CT",
        )
        cc_edges.append((ci, cj, lm, None))
    ccfmn = build_ccfmn(
        [(cid, latents[cid], f"{cid}:CT") for cid in ids], cc_edges
    )
    glb = compute_glb(ccfmn, cfg.m)
    files += _saved_files(save_ccfmn(tree.out / "cross" / "ccfmn", ccfmn))
    files += _saved_files(save_glb(tree.out / "cross" / "glb", glb))
    return files


def _load_latents(tree):
    return {
        col["id"]: load_latent(tree.out / "cross" / col["id"] / "latent")
        for col in tree.collections()
    }


def _stage_intrinsic(tree, jobs):
    cfg = tree.config
    files = []
    latents = _load_latents(tree)
    glb = load_glb(tree.out / "cross" / "glb")
    idir = tree.out / "intrinsic"
    idir.mkdir(parents=True, exist_ok=True)

    spectra = []
    trunc_report = {}
    diffs_global, labels_global = [], []
    for col in tree.collections():
        cid = col["id"]
        lb = latents[cid]
        ct_basis = tree.basis(f"{cid}:CT")
        ct = tree.clean(f"{cid}:CT")
        session_ids = [f"{cid}:{s['label']}" for s in col["sessions"]]
        per_kind = {}
        for kind, make in (("area", area_csd), ("conformal", conformal_csd)):
            diffs = [make(lb, sid) for sid in session_ids]
            op = variability_operator(diffs, pairing="all",
                                      name=f"{cid}:{kind}")
            t = cfg.truncation.get(kind) or suggest_truncation(
                op, ct_basis, lb, ct.boundary_vertices
            )
            trunc_report.setdefault(kind, {})[cid] = int(t)
            fn = distinctive_function(op, truncate_at=t)
            per_kind[kind] = to_vertex_field(fn, ct_basis, lb)
            for i, lam in enumerate(op.eigvals):
                spectra.append((kind, cid, i, float(lam)))
            if kind == "area":
                for sid, d in zip(session_ids, diffs):
                    diffs_global.append(global_transfer(d, glb, cid))
                    labels_global.append((cid, sid.split(":")[1]))
        out_mesh = ct.with_scalars(
            **{f"{k}_distinctive": v for k, v in per_kind.items()}
        )
        path = idir / f"{cid}.distinctive.ply"
        save_mesh(out_mesh, path)
        files.append(path)

    H = variability_operator(diffs_global, pairing="contrast",
                             labels=labels_global, name="H")
    t_h = cfg.truncation.get("global") or 1
    trunc_report["global"] = {"H": int(t_h)}
    fn = distinctive_function(H, truncate_at=t_h)
    for i, lam in enumerate(H.eigvals):
        spectra.append(("global", "H", i, float(lam)))
    for col in tree.collections():
        cid = col["id"]
        field = to_vertex_field(
            fn, tree.basis(f"{cid}:CT"), latents[cid],
            collection_id=cid, glb=glb,
        )
        path = idir / f"{cid}.cross_session.ply"
        save_mesh(tree.clean(f"{cid}:CT").with_scalars(cross_session=field),
                  path)
        files.append(path)

    spath = idir / "spectra.csv"
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["analysis", "collection", "index", "eigenvalue"])
        w.writerows(spectra)
    files.append(spath)
    tpath = idir / "truncation.json"
    tpath.write_text(json.dumps(trunc_report, indent=2, sort_keys=True) + "\n")
    files.append(tpath)
    return files


def _stage_extrinsic(tree, jobs):
    cfg = tree.config
    files = []
    latents = _load_latents(tree)
    offsets = BandOffsets(*cfg.band_offsets)
    summary = []
    for col in tree.collections():
        cid = col["id"]
        ct = tree.clean(f"{cid}:CT")
        ct_basis = tree.basis(f"{cid}:CT")
        ptv = load_mesh(tree.root / col["ptv"]).vertices
        roi = project_roi(ptv, ct)
        _, align_mask = build_roi_band(ct, roi, offsets)
        roi_cut = close_roi(ct, roi)
        roi_vol = signed_volume(roi_cut) / 1000.0
        edir = tree.out / "extrinsic" / cid
        edir.mkdir(parents=True, exist_ok=True)

        def one(srec):
            label = srec["label"]
            sid = f"{cid}:{label}"
            scan = tree.clean(sid)
            pm_cs = consistent_p2p(latents[cid], ct_basis, tree.basis(sid))
            mask_scan = transfer_roi(align_mask, pm_cs)
            pm = load_pointmap(tree.out / "refine" / cid / f"{label}.pmap")
            ok = (pm.assignments >= 0) & mask_scan
            if ok.sum() < 3:
                raise ContractError(
                    f"{sid}: too few band correspondences to align"
                )
            seed = rigid_from_correspondences(
                scan.vertices[ok], ct.vertices[pm.assignments[ok]]
            )
            # correspondence seeds can drift on partial scans; let an
            # untrimmed pass converge before trimming locks points out
            iters, every, frac = cfg.icp
            pts = scan.vertices[mask_scan]
            coarse = trimmed_icp(
                pts, ct, init=seed,
                iterations=2 * int(iters), trim_every=int(every),
                trim_fraction=0.0,
            )
            icp = trimmed_icp(
                pts, ct, init=coarse.transform,
                iterations=int(iters), trim_every=int(every),
                trim_fraction=float(frac),
            )
            aligned = scan.transformed(
                icp.transform.rotation, icp.transform.translation
            )
            delta = displacement_field(ct, roi, aligned)
            mags = delta.magnitudes()
            use = delta.roi & delta.valid
            dv = volume_change(roi_cut, delta)
            path = edir / f"{label}.delta.ply"
            save_mesh(ct.with_scalars(delta_mm=mags * roi), path)
            return (path, {
                "collection": cid,
                "session": label,
                "mean_mm": float(mags[use].mean()),
                "std_mm": float(mags[use].std()),
                "n_valid": int(use.sum()),
                "roi_vol_mL": roi_vol,
                "dv_rel_pct": float(dv),
            })

        for path, row in _map_jobs(one, col["sessions"], jobs):
            files.append(path)
            summary.append(row)

    spath = tree.out / "extrinsic" / "summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(spath)
    return files


def _stage_report(tree, jobs):
    rows = json.loads(
        (tree.out / "extrinsic" / "summary.json").read_text()
    )
    rdir = tree.out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    dpath = rdir / "displacements.csv"
    with open(dpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "session", "mean_mm", "std_mm", "n_valid"])
        for r in rows:
            w.writerow([r["collection"], r["session"],
                        f"{r['mean_mm']:.4f}", f"{r['std_mm']:.4f}",
                        r["n_valid"]])
    vpath = rdir / "volumes.csv"
    with open(vpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "session", "roi_vol_mL", "dv_rel_pct"])
        for r in rows:
            w.writerow([r["collection"], r["session"],
                        f"{r['roi_vol_mL']:.4f}", f"{r['dv_rel_pct']:.4f}"])
    return [dpath, vpath]


_RUNNERS = {
    "preprocess": _stage_preprocess,
    "spectral": _stage_spectral,
    "match": _stage_match,
    "refine": _stage_refine,
    "cross": _stage_cross,
    "intrinsic": _stage_intrinsic,
    "extrinsic": _stage_extrinsic,
    "report": _stage_report,
}


def run_synth(spec, out_dir):
    """Generate a dataset under ``out_dir/dataset`` and stamp the stage."""
    if not isinstance(spec, SynthSpec):
        spec = SynthSpec(**spec)
    out = Path(out_dir)
    (out / "synth").mkdir(parents=True, exist_ok=True)
    manifest = write_dataset(generate_dataset(spec), out / "synth" / "dataset")
    files = [p for p in (out / "synth").rglob("*")
             if p.is_file() and p.name != "stage.json"]
    _finish_stage(out, "synth", {"spec": _hash_obj(repr(spec))}, files)
    return manifest


def run_stage(stage, manifest_path, config=None, out_dir=None, jobs=1):
    """Run one pipeline stage; returns the stage.json path."""
    if stage == "synth":
        raise ContractError("synth takes a generator spec; use run_synth")
    if stage not in _RUNNERS:
        raise ContractError(
            f"unknown stage {stage!r}; stages are {', '.join(STAGES)}"
        )
    config = config or PipelineConfig()
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    for pre in _PREREQS[stage]:
        _verify_stage(out_dir, pre, manifest_path, config)
    inputs = _input_hashes(out_dir, stage, manifest_path, config)
    tree = _Tree(manifest_path, config, out_dir)
    (out_dir / stage).mkdir(parents=True, exist_ok=True)
    files = _RUNNERS[stage](tree, int(jobs))
    return _finish_stage(out_dir, stage, inputs, files)


def run_all(manifest_path, config=None, out_dir=None, jobs=1):
    markers = []
    for stage in STAGES[1:]:
        markers.append(
            run_stage(stage, manifest_path, config, out_dir, jobs)
        )
    return markers
