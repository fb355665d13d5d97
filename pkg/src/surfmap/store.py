"""On-disk artifact formats.

A single container format covers all dense-matrix artifacts: a magic
string, a JSON header (metadata plus array directory) and raw
little-endian payload bytes.  Point maps travel as CSV, networks and
latent bases as directories of containers indexed by a JSON manifest.
Everything is byte-deterministic for fixed inputs.
"""

import hashlib
import json

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"SMAPBIN1"


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


def write_arrays(path, meta, arrays):
    """Write named float64/int64 arrays plus a metadata dict."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in (np.float64, np.int64):
            raise ShapeError(f"array {name!r} must be float64 or int64")
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = _json_bytes({"meta": meta, "arrays": directory})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(len(header), dtype="<u8").tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_arrays(path):
    """Inverse of :func:`write_arrays`; returns ``(meta, arrays)``."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError("not a surfmap binary container", path)
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        try:
            header = json.loads(fh.read(int(hlen)).decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt container header: {exc}", path) from exc
        payload = fh.read()
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(
            payload, dtype=dt, count=count, offset=spec["offset"]
        ).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(dt.newbyteorder("="))
    return header["meta"], arrays


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------ bases

def save_basis(path, basis):
    write_arrays(
        path,
        {"kind": "spectral_basis", "shape_id": basis.shape_id},
        {"phi": basis.phi, "lam": basis.lam, "mass": basis.mass},
    )
    return path


def load_basis(path):
    from .spectral import SpectralBasis

    meta, arrays = read_arrays(path)
    if meta.get("kind") != "spectral_basis":
        raise FormatError(f"container is {meta.get('kind')!r}, "
                          "expected spectral_basis", path)
    return SpectralBasis(
        phi=arrays["phi"], lam=arrays["lam"], mass=arrays["mass"],
        shape_id=meta.get("shape_id", ""),
    )


# ------------------------------------------------------------ maps

def save_fmap(path, fmap):
    write_arrays(
        path,
        {
            "kind": "functional_map",
            "source_id": fmap.source_id,
            "target_id": fmap.target_id,
        },
        {"C": fmap.C},
    )
    return path


def load_fmap(path):
    from .fmap import FunctionalMap

    meta, arrays = read_arrays(path)
    if meta.get("kind") != "functional_map":
        raise FormatError(f"container is {meta.get('kind')!r}, "
                          "expected functional_map", path)
    return FunctionalMap(
        C=arrays["C"],
        source_id=meta["source_id"],
        target_id=meta["target_id"],
    )


def save_pointmap(path, pmap):
    lines = [
        f"# source={pmap.source_id} target={pmap.target_id} "
        f"n_target={pmap.n_target}",
        "source_index,target_index",
    ]
    lines += [f"{i},{t}" for i, t in enumerate(pmap.assignments)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_pointmap(path):
    from .fmap import PointMap

    with open(path, "r") as fh:
        head = fh.readline().strip()
        if not head.startswith("#"):
            raise FormatError("point-map CSV missing metadata line", path, 1)
        meta = dict(
            tok.split("=", 1) for tok in head.lstrip("# ").split() if "=" in tok
        )
        header = fh.readline()
        if "source_index" not in header:
            raise FormatError("point-map CSV missing column header", path, 2)
        assignments = []
        for no, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            try:
                src, tgt = line.split(",")
                src_i, tgt_i = int(src), int(tgt)
            except ValueError:
                raise FormatError("bad point-map row", path, no) from None
            if src_i != len(assignments):
                raise FormatError("point-map rows out of order", path, no)
            assignments.append(tgt_i)
    return PointMap(
        assignments=np.asarray(assignments, dtype=np.int64),
        n_target=int(meta["n_target"]),
        source_id=meta.get("source", ""),
        target_id=meta.get("target", ""),
    )
