"""Synthetic torso-scan collections with full ground truth.

A collection mimics one patient: a clean, full-coverage, unposed
CT-role mesh plus per-session scans where the treated-breast bump is
scaled (the monitored volume change), an arm strip moves (nuisance
variability), coverage is cropped, Gaussian noise is added and a random
rigid pose is applied.  Correspondences to the base grid, poses, patch
masks and analytic bump volumes are all recorded.

The torso is a height-modulated cross-section graph y = f(x, z) over a
regular grid, with two Gaussian bumps for breasts.  A deliberate
left-right asymmetry term keeps the Laplacian spectrum free of the
symmetric/antisymmetric eigenfunction ambiguities a mirror-symmetric
shape would produce.  A bump of height h and radius rho adds exactly
pi * rho^2 * h of volume (2-D Gaussian integral), which is what the
volume ground truth is built from.

Frame: x lateral, y depth (anterior positive), z up.  Units mm.
"""

import csv
import importlib.resources
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ContractError, FormatError
from .extrinsic import RigidTransform
from .fmap import PointMap
from .mesh import TriMesh, submesh
from .meshio import load_mesh, save_mesh

SESSION_LABELS = ["A", "B", "S1", "S5", "S10", "S15", "S20", "S25", "S33",
                  "M1", "M3"]
PATCH_LABEL = "gt_patch"
CHANGED_LABEL = "gt_changed"
FRAME = {"x": "lateral", "y": "depth", "z": "up"}

# default per-session treated-bump scale: early swelling, later shrinkage
_SCALE_SCHEDULE = [1.00, 1.06, 1.10, 1.05, 0.98, 0.94, 0.91, 0.89, 0.88,
                   0.87, 0.86]


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the generator; defaults give a mild, solvable dataset."""

    n_collections: int = 2
    n_sessions: int = 4
    seed: int = 0
    grid: tuple = (52, 50)          # vertices across width, height
    width: float = 350.0
    height: float = 300.0
    depth: float = 110.0
    bump_radius: float = 36.0
    bump_height: float = 32.0
    patch_factor: float = 1.5       # ROI radius = factor * bump_radius
    bump_scales: tuple = None       # per-session; None -> schedule
    relief: float = 7.0             # rib/spine undulation amplitude
    noise_sigma: float = 0.3
    max_rotation_deg: float = 8.0
    max_translation: float = 25.0
    crop: bool = True
    crop_fraction: float = 0.10
    arm_amplitude: float = 5.0
    treated_side: str = ""          # "L"/"R" pins laterality; "" randomizes
    validate_volumes: bool = True

    def __post_init__(self):
        if self.n_collections < 1 or self.n_sessions < 1:
            raise ContractError("need at least one collection and session")
        if self.n_sessions > len(SESSION_LABELS):
            raise ContractError(
                f"at most {len(SESSION_LABELS)} sessions are supported"
            )
        nu, nv = self.grid
        if nu < 8 or nv < 8:
            raise ContractError("grid too coarse")
        if self.noise_sigma < 0 or self.crop_fraction < 0:
            raise ContractError("negative noise or crop fraction")
        if self.relief < 0:
            raise ContractError("negative relief amplitude")
        if self.treated_side not in ("", "L", "R"):
            raise ContractError("treated_side must be 'L', 'R' or empty")

    def session_scales(self):
        if self.bump_scales is not None:
            if len(self.bump_scales) != self.n_sessions:
                raise ContractError("bump_scales length != n_sessions")
            return list(self.bump_scales)
        reps = -(-self.n_sessions // len(_SCALE_SCHEDULE))
        return (_SCALE_SCHEDULE * reps)[: self.n_sessions]


@dataclass(frozen=True)
class SessionRecord:
    label: str
    mesh: TriMesh
    gt_map: PointMap               # session vertex -> base grid vertex
    pose: RigidTransform           # applied to the unposed session surface
    bump_scale: float
    dv_roi_mm3: float              # analytic volume change inside the patch
    dv_full_mm3: float             # analytic total bump volume change


@dataclass(frozen=True)
class CollectionRecord:
    collection_id: str
    ct: TriMesh
    ptv: np.ndarray
    sessions: list
    roi_radius: float
    treated_side: str
    params: dict = field(repr=False)


@dataclass(frozen=True)
class Dataset:
    spec: SynthSpec
    collections: list
    frame: dict = field(default_factory=lambda: dict(FRAME))


# ------------------------------------------------------------ geometry

def grid_mesh_faces(nu, nv):
    """Union-jack triangulation of an nu x nv vertex grid, normals +y."""
    i, j = np.meshgrid(np.arange(nu - 1), np.arange(nv - 1), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    a = j * nu + i
    b = j * nu + i + 1
    c = (j + 1) * nu + i + 1
    d = (j + 1) * nu + i
    even = (i + j) % 2 == 0
    f1 = np.where(even[:, None], np.stack([a, c, b], 1), np.stack([a, d, b], 1))
    f2 = np.where(even[:, None], np.stack([a, d, c], 1), np.stack([b, d, c], 1))
    return np.concatenate([f1, f2]).astype(np.int64)


def _torso_params(spec, rng):
    u = rng.uniform
    # draw even when pinned so the remaining params see one rng stream
    coin = rng.random()
    side = spec.treated_side or ("L" if coin < 0.5 else "R")
    u_treat = (0.31 if side == "L" else 0.69) + u(-0.015, 0.015)
    u_contra = 1.0 - u_treat + u(-0.01, 0.01)
    return {
        "width": spec.width * (1 + u(-0.04, 0.04)),
        "height": spec.height * (1 + u(-0.04, 0.04)),
        "depth": spec.depth * (1 + u(-0.06, 0.06)),
        "asym": 0.12 + u(0.0, 0.06),
        "side": side,
        "u_treat": u_treat,
        "v_treat": 0.58 + u(-0.02, 0.02),
        "u_contra": u_contra,
        "v_contra": 0.58 + u(-0.02, 0.02),
        "rho_treat": spec.bump_radius * (1 + u(-0.08, 0.08)),
        "rho_contra": spec.bump_radius * (1 + u(-0.08, 0.08)),
        "h_treat": spec.bump_height * (1 + u(-0.12, 0.12)),
        "h_contra": spec.bump_height * (1 + u(-0.12, 0.12)),
        "relief": spec.relief * (1 + u(-0.15, 0.15)),
        # anatomy is shared: rib/spine positions vary a little, not freely
        "ph_u": 0.15 + u(-0.05, 0.05),
        "ph_v": 0.40 + u(-0.05, 0.05),
    }


def _check_bump_layout(spec, p):
    """Bumps must stay apart and inside the grid for the analytic volume
    (and a self-intersection-free graph) to hold."""
    w, h = p["width"], p["height"]
    margin = 2.3  # radii of clearance to the grid edge: ~0.5% tail loss
    for which in ("treat", "contra"):
        rho = p[f"rho_{which}"]
        uc, vc = p[f"u_{which}"], p[f"v_{which}"]
        if min(uc * w, (1 - uc) * w) < margin * rho or \
           min(vc * h, (1 - vc) * h) < margin * rho:
            raise ContractError(
                f"bump {which!r} too close to the grid edge for its radius"
            )
    sep = abs(p["u_treat"] - p["u_contra"]) * w
    r_t = spec.patch_factor * p["rho_treat"]
    r_c = spec.patch_factor * p["rho_contra"]
    if sep < r_t + r_c + 5.0:
        raise ContractError("bump patches overlap; reduce radius or spread")
    if p["h_treat"] > 1.2 * p["rho_treat"] or p["h_contra"] > 1.2 * p["rho_contra"]:
        raise ContractError("bump too steep; surface would self-intersect")


def _surface(spec, p, uu, vv, bump_scale, arm_amp):
    """Heights y(u, v) of the torso graph (vectorized over grids)."""
    q = 2.0 * uu - 1.0
    cross = (1 - q**2) * (0.75 + 0.25 * (1 - q**2))
    prof = 0.65 + 0.35 * np.sin(np.pi * vv)
    y = p["depth"] * cross * prof
    # left-right symmetry breaker
    y += p["asym"] * p["depth"] * q * (1 - q**2) * (1.2 - vv)
    # rib/spine relief.  The bare dome is nearly invariant under
    # in-plane dilation, and spectral refinement of a cropped session
    # drifts onto the stretched re-parameterization of the full grid;
    # mid-scale undulation anchors the true restriction instead.
    y += p["relief"] * (
        np.sin(2 * np.pi * (1.9 * uu + p["ph_u"])) * (0.35 + 0.65 * vv)
        + np.sin(2 * np.pi * (2.7 * vv + p["ph_v"])) * (1 - 0.5 * q**2)
        + 0.4 * np.sin(2 * np.pi * (3.6 * uu + 2.0 * p["ph_v"]))
        * np.sin(2 * np.pi * (3.2 * vv + 1.5 * p["ph_u"]))
    )

    x = (uu - 0.5) * p["width"]
    z = vv * p["height"]
    for which, scale in (("treat", bump_scale), ("contra", 1.0)):
        xc = (p[f"u_{which}"] - 0.5) * p["width"]
        zc = p[f"v_{which}"] * p["height"]
        r2 = (x - xc) ** 2 + (z - zc) ** 2
        y += scale * p[f"h_{which}"] * np.exp(-r2 / p[f"rho_{which}"] ** 2)
    if arm_amp:
        y += arm_amp * (
            np.exp(-((uu - 0.03) / 0.03) ** 2)
            + np.exp(-((uu - 0.97) / 0.03) ** 2)
        )
    return x, y, z


def _grid_vertices(spec, p, bump_scale, arm_amp):
    nu, nv = spec.grid
    uu, vv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv),
                         indexing="ij")
    # vertex index = j * nu + i, i.e. v-major rows
    x, y, z = _surface(spec, p, uu.T, vv.T, bump_scale, arm_amp)
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def _patch_mask(spec, p, verts):
    xc = (p["u_treat"] - 0.5) * p["width"]
    zc = p["v_treat"] * p["height"]
    r = spec.patch_factor * p["rho_treat"]
    d2 = (verts[:, 0] - xc) ** 2 + (verts[:, 2] - zc) ** 2
    return d2 <= r * r


def _changed_mask(p, verts):
    # full support of the treated bump (>= 1% of its height), the region
    # a session-scale change actually moves; wider than the ROI band
    xc = (p["u_treat"] - 0.5) * p["width"]
    zc = p["v_treat"] * p["height"]
    d2 = (verts[:, 0] - xc) ** 2 + (verts[:, 2] - zc) ** 2
    return np.exp(-d2 / p["rho_treat"] ** 2) >= 0.01


def _planform_integral(spec, p, faces, dy):
    """Exact integral of a piecewise-linear height change over the grid."""
    nu, nv = spec.grid
    uu, vv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv),
                         indexing="ij")
    x = ((uu - 0.5) * p["width"]).T.ravel()
    z = (vv * p["height"]).T.ravel()
    xz = np.stack([x, z], axis=1)
    tri = xz[faces]
    area = 0.5 * np.abs(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    )
    return float((area * dy[faces].mean(axis=1)).sum())


def _crop_mask(spec, rng, p):
    """Vertex mask removing a whole grid-side strip, away from the bumps."""
    nu, nv = spec.grid
    mode = rng.choice(["none", "left", "right", "top"])
    frac = rng.uniform(0.4, 1.0) * spec.crop_fraction
    i = np.arange(nu * nv) % nu
    j = np.arange(nu * nv) // nu
    keep = np.ones(nu * nv, dtype=bool)
    # clearance: never cut into either patch
    u_lo = min(p["u_treat"] - spec.patch_factor * p["rho_treat"] / p["width"],
               p["u_contra"] - spec.patch_factor * p["rho_contra"] / p["width"])
    u_hi = max(p["u_treat"] + spec.patch_factor * p["rho_treat"] / p["width"],
               p["u_contra"] + spec.patch_factor * p["rho_contra"] / p["width"])
    v_hi = max(p["v_treat"] + spec.patch_factor * p["rho_treat"] / p["height"],
               p["v_contra"] + spec.patch_factor * p["rho_contra"] / p["height"])
    if mode == "left":
        cut = min(int(frac * nu), max(int((u_lo - 0.02) * nu), 0))
        keep = i >= cut
    elif mode == "right":
        cut = min(int(frac * nu), max(int((1 - u_hi - 0.02) * nu), 0))
        keep = i < nu - cut
    elif mode == "top":
        cut = min(int(frac * nv), max(int((1 - v_hi - 0.02) * nv), 0))
        keep = j < nv - cut
    return keep


def _random_pose(spec, rng):
    if spec.max_rotation_deg == 0 and spec.max_translation == 0:
        return RigidTransform.identity()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.3, 1.0) * spec.max_rotation_deg)
    t = rng.uniform(-spec.max_translation, spec.max_translation, size=3)
    return RigidTransform.from_axis_angle(axis, angle, t)


def generate_collection(spec, index):
    """One patient-like collection with its CT-role mesh and sessions."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    p = _torso_params(spec, rng)
    _check_bump_layout(spec, p)
    nu, nv = spec.grid
    faces = grid_mesh_faces(nu, nv)
    cid = f"P{index:02d}"

    base = _grid_vertices(spec, p, bump_scale=1.0, arm_amp=0.0)
    patch = _patch_mask(spec, p, base)
    changed = _changed_mask(p, base)
    labels = {PATCH_LABEL: patch, CHANGED_LABEL: changed}
    ct = TriMesh(base, faces, dict(labels))
    ptv = base[patch].copy()
    rho, h = p["rho_treat"], p["h_treat"]
    r_roi = spec.patch_factor * rho
    in_roi = 1.0 - np.exp(-(r_roi / rho) ** 2)

    if spec.validate_volumes:
        # bump_scale multiplies only the treated bump, so the height
        # difference against scale 0 isolates it
        unbumped = _grid_vertices(spec, p, bump_scale=0.0, arm_amp=0.0)
        got = _planform_integral(spec, p, faces, base[:, 1] - unbumped[:, 1])
        want = np.pi * rho**2 * h
        if abs(got - want) > 0.01 * want:
            raise ContractError(
                f"bump volume off analytic value by "
                f"{abs(got - want) / want:.2%}; grid too coarse"
            )

    scales = spec.session_scales()
    sessions = []
    for j in range(spec.n_sessions):
        srng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, index, j])
        )
        s = scales[j]
        arm = srng.uniform(-spec.arm_amplitude, spec.arm_amplitude)
        verts = _grid_vertices(spec, p, bump_scale=s, arm_amp=arm)
        full = TriMesh(verts, faces, dict(labels))
        if spec.crop:
            keep = _crop_mask(spec, srng, p)
            cropped, old_index = submesh(full, keep)
        else:
            cropped, old_index = full, np.arange(full.n_vertices)
        v = cropped.vertices
        if spec.noise_sigma > 0:
            v = v + srng.normal(scale=spec.noise_sigma, size=v.shape)
        pose = _random_pose(spec, srng)
        v = pose.apply(v)
        mesh = TriMesh(v, cropped.faces, cropped.vertex_labels)
        gt_map = PointMap(
            assignments=old_index.astype(np.int64),
            n_target=nu * nv,
            source_id=f"{cid}:{SESSION_LABELS[j]}",
            target_id=f"{cid}:CT",
        )
        dv_full = np.pi * rho**2 * h * (s - 1.0)
        sessions.append(
            SessionRecord(
                label=SESSION_LABELS[j],
                mesh=mesh,
                gt_map=gt_map,
                pose=pose,
                bump_scale=float(s),
                dv_roi_mm3=float(dv_full * in_roi),
                dv_full_mm3=float(dv_full),
            )
        )

    return CollectionRecord(
        collection_id=cid,
        ct=ct,
        ptv=ptv,
        sessions=sessions,
        roi_radius=float(r_roi),
        treated_side=p["side"],
        params=p,
    )


def generate_dataset(spec):
    return Dataset(
        spec=spec,
        collections=[
            generate_collection(spec, i) for i in range(spec.n_collections)
        ],
    )


# ------------------------------------------------------------- sphere

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron projected onto a sphere; outward oriented."""
    verts = _ICO_VERTS.copy()
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e_sorted = np.sort(e, axis=1)
        uniq, inv = np.unique(e_sorted, axis=0, return_inverse=True)
        mid = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
        m01, m12, m20 = len(verts) + inv.reshape(3, -1)
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate(
            [
                np.stack([a, m01, m20], 1),
                np.stack([m01, b, m12], 1),
                np.stack([m20, m12, c], 1),
                np.stack([m01, m12, m20], 1),
            ]
        )
        verts = np.concatenate([verts, mid])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts * radius + np.asarray(center, float), faces)


# -------------------------------------------------------- disk layout

def _pose_dict(pose):
    return {
        "rotation": np.asarray(pose.rotation).tolist(),
        "translation": np.asarray(pose.translation).tolist(),
    }


def emit_manifest(dataset):
    """Manifest dict for a dataset laid out by :func:`write_dataset`.

    Paths are relative to the manifest file.  Ground-truth poses and
    volumes live in one ``gt.json`` per collection; per-session
    correspondences in CSV next to each mesh.
    """
    cols = []
    for col in dataset.collections:
        cid = col.collection_id
        cols.append({
            "id": cid,
            "ct": f"{cid}/ct.ply",
            "ptv": f"{cid}/ptv.ply",
            "ground_truth": f"{cid}/gt.json",
            "treated_side": col.treated_side,
            "roi_radius_mm": float(col.roi_radius),
            "sessions": [
                {
                    "label": s.label,
                    "mesh": f"{cid}/{s.label}.ply",
                    "gt_correspondence": f"{cid}/{s.label}.gt.csv",
                }
                for s in col.sessions
            ],
        })
    return {
        "schema_version": 1,
        "frame": dict(dataset.frame),
        "generator": asdict(dataset.spec),
        "collections": cols,
    }


def _dump_json(obj, path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_dataset(dataset, out_dir):
    """Write meshes, ground truth and the manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for col in dataset.collections:
        cdir = out / col.collection_id
        cdir.mkdir(exist_ok=True)
        save_mesh(col.ct, cdir / "ct.ply")
        save_mesh(TriMesh(col.ptv, None), cdir / "ptv.ply")
        gt = {
            "roi_radius_mm": float(col.roi_radius),
            "treated_side": col.treated_side,
            "mask_labels": sorted(col.ct.vertex_labels),
            "sessions": {},
        }
        for s in col.sessions:
            save_mesh(s.mesh, cdir / f"{s.label}.ply")
            with open(cdir / f"{s.label}.gt.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["session_vertex", "grid_vertex"])
                w.writerows(enumerate(s.gt_map.assignments.tolist()))
            gt["sessions"][s.label] = {
                "pose": _pose_dict(s.pose),
                "bump_scale": float(s.bump_scale),
                "dv_roi_mm3": float(s.dv_roi_mm3),
                "dv_full_mm3": float(s.dv_full_mm3),
            }
        _dump_json(gt, cdir / "gt.json")
    manifest = emit_manifest(dataset)
    _dump_json(manifest, out / "manifest.json")
    return out / "manifest.json"


def _manifest_schema():
    ref = importlib.resources.files("surfmap") / "data/manifest.schema.json"
    return json.loads(ref.read_text())


def load_manifest(path):
    """Read and schema-validate a dataset manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, _manifest_schema())
    except jsonschema.ValidationError as exc:
        raise FormatError(
            f"{path} fails the manifest schema at "
            f"{'/'.join(str(p) for p in exc.absolute_path) or '<root>'}: "
            f"{exc.message}"
        ) from exc
    return doc


def load_session_gt(path):
    """Ground-truth correspondence CSV -> PointMap-style index array."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64,
                      ndmin=2)
    order = np.argsort(rows[:, 0])
    return rows[order, 1]
