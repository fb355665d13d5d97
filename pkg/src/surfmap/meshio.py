"""Mesh file I/O: OFF, OBJ and PLY (ascii + binary little-endian).

Vertices and faces are loaded exactly as stored; no cleanup happens here.
Extra per-vertex PLY properties round-trip through
``TriMesh.vertex_labels`` (0/1-valued) and ``TriMesh.vertex_scalars``.
"""

import numpy as np

from .errors import FormatError, UnsupportedTopologyError
from .mesh import TriMesh

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _fmt(x):
    """Shortest decimal representation that round-trips a float64."""
    return repr(float(x))


# ---------------------------------------------------------------- OFF

def _load_off(path):
    with open(path, "r") as fh:
        raw = fh.readlines()
    lines = []
    for no, line in enumerate(raw, start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            lines.append((no, body))
    if not lines:
        raise FormatError("empty OFF file", path)
    pos = 0
    no, head = lines[pos]
    if head.upper().startswith("OFF"):
        head = head[3:].strip()
        if not head:
            pos += 1
            if pos >= len(lines):
                raise FormatError("missing OFF counts line", path, no)
            no, head = lines[pos]
    try:
        nv, nf = [int(t) for t in head.split()[:2]]
    except ValueError:
        raise FormatError("bad OFF counts line", path, no) from None
    pos += 1
    if len(lines) - pos < nv + nf:
        raise FormatError(
            f"expected {nv} vertices and {nf} faces", path, lines[-1][0]
        )
    verts = np.empty((nv, 3))
    for r in range(nv):
        no, body = lines[pos + r]
        parts = body.split()
        if len(parts) != 3:
            raise FormatError("vertex line must have 3 coordinates", path, no)
        try:
            verts[r] = [float(p) for p in parts]
        except ValueError:
            raise FormatError("bad vertex coordinate", path, no) from None
    pos += nv
    faces = np.empty((nf, 3), dtype=np.int64)
    for r in range(nf):
        no, body = lines[pos + r]
        parts = body.split()
        try:
            cnt = int(parts[0])
            idx = [int(p) for p in parts[1:]]
        except (ValueError, IndexError):
            raise FormatError("bad face line", path, no) from None
        if cnt != 3 or len(idx) < 3:
            raise UnsupportedTopologyError(
                f"face with {cnt} vertices; only triangles are supported",
                path, no,
            )
        faces[r] = idx[:3]
    return TriMesh(verts, faces)


def _save_off(mesh, path):
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------- OBJ

def _load_obj(path):
    verts, faces = [], []
    with open(path, "r") as fh:
        for no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise FormatError("vertex needs 3 coordinates", path, no)
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise FormatError("bad vertex coordinate", path, no) from None
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise UnsupportedTopologyError(
                        f"face with {len(refs)} vertices; "
                        "only triangles are supported",
                        path, no,
                    )
                idx = []
                for ref in refs:
                    tok = ref.split("/")[0]
                    try:
                        k = int(tok)
                    except ValueError:
                        raise FormatError("bad face index", path, no) from None
                    if k == 0:
                        raise FormatError("OBJ indices are 1-based", path, no)
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(idx)
            # normals, texture coords, groups, materials are ignored
    return TriMesh(
        np.asarray(verts, float).reshape(-1, 3),
        np.asarray(faces, np.int64).reshape(-1, 3),
    )


def _save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------- PLY

def _parse_ply_header(fh, path):
    def next_line(expect=None):
        raw = fh.readline()
        if not raw:
            raise FormatError("truncated PLY header", path)
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise FormatError("not a PLY file", path, 1)
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype | ("list", cdt, idt))])
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unsupported PLY format {parts[1]!r}", path)
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property before element", path)
            if parts[1] == "list":
                cdt = _PLY_DTYPES.get(parts[2])
                idt = _PLY_DTYPES.get(parts[3])
                if cdt is None or idt is None:
                    raise FormatError(f"unknown PLY type in {line!r}", path)
                elements[-1][2].append((parts[4], ("list", cdt, idt)))
            else:
                dt = _PLY_DTYPES.get(parts[1])
                if dt is None:
                    raise FormatError(f"unknown PLY type {parts[1]!r}", path)
                elements[-1][2].append((parts[2], dt))
    if fmt is None:
        raise FormatError("PLY header missing format line", path)
    return fmt, elements


def _load_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()

    verts = None
    faces = np.empty((0, 3), dtype=np.int64)
    extra = {}
    offset = 0

    if fmt == "ascii":
        tokens = body.split()
        tpos = 0
        for name, count, props in elements:
            if any(isinstance(d, tuple) for _, d in props):
                # list properties: per-row token walk
                lists = []
                for _ in range(count):
                    row = None
                    for _pname, d in props:
                        if isinstance(d, tuple):
                            k = int(tokens[tpos]); tpos += 1
                            row = [int(t) for t in tokens[tpos:tpos + k]]
                            tpos += k
                        else:
                            tpos += 1
                    lists.append(row)
                if name == "face":
                    for r in lists:
                        if len(r) != 3:
                            raise UnsupportedTopologyError(
                                f"face with {len(r)} vertices; "
                                "only triangles are supported", path,
                            )
                    faces = np.asarray(lists, dtype=np.int64).reshape(-1, 3)
            else:
                n_p = len(props)
                arr = np.array(
                    [float(t) for t in tokens[tpos:tpos + count * n_p]]
                ).reshape(count, n_p)
                tpos += count * n_p
                if name == "vertex":
                    verts, extra = _split_vertex_table(arr, props, path)
    else:
        for name, count, props in elements:
            if any(isinstance(d, tuple) for _, d in props):
                if name != "face":
                    raise FormatError(
                        f"list property outside face element ({name})", path
                    )
                if len(props) != 1:
                    raise FormatError("face element must be a single list", path)
                _, (_, cdt, idt) = props[0]
                rec = np.dtype([("n", "<" + cdt), ("v", "<" + idt, (3,))])
                avail = len(body) - offset
                if count and avail < count * rec.itemsize:
                    # ragged lists (non-triangles) would land here too
                    raise UnsupportedTopologyError(
                        "face block size mismatch; only triangles are supported",
                        path,
                    )
                chunk = np.frombuffer(
                    body, dtype=rec, count=count, offset=offset
                )
                if count and not np.all(chunk["n"] == 3):
                    raise UnsupportedTopologyError(
                        "non-triangular face; only triangles are supported",
                        path,
                    )
                faces = chunk["v"].astype(np.int64).reshape(-1, 3)
                offset += count * rec.itemsize
            else:
                rec = np.dtype([(p, "<" + d) for p, d in props])
                chunk = np.frombuffer(body, dtype=rec, count=count, offset=offset)
                offset += count * rec.itemsize
                if name == "vertex":
                    arr = np.stack(
                        [chunk[p].astype(np.float64) for p, _ in props], axis=1
                    )
                    verts, extra = _split_vertex_table(arr, props, path)

    if verts is None:
        raise FormatError("PLY file has no vertex element", path)
    labels = {k: v.astype(bool) for k, v in extra.items()
              if np.isin(v, (0.0, 1.0)).all()}
    scalars = {k: v for k, v in extra.items() if k not in labels}
    return TriMesh(verts, faces, labels, scalars)


def _split_vertex_table(arr, props, path):
    names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"vertex element missing property {axis!r}", path)
    verts = arr[:, [names.index("x"), names.index("y"), names.index("z")]]
    extra = {
        n: arr[:, i] for i, n in enumerate(names) if n not in ("x", "y", "z")
    }
    return verts, extra


def _save_ply(mesh, path, binary):
    extras = list(mesh.vertex_labels.items()) + list(mesh.vertex_scalars.items())
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if binary else "format ascii 1.0"
    )
    header.append(f"element vertex {mesh.n_vertices}")
    header += ["property double x", "property double y", "property double z"]
    for name, _ in extras:
        header.append(f"property double {name}")
    header.append(f"element face {mesh.n_faces}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")

    cols = [mesh.vertices]
    for _, values in extras:
        cols.append(np.asarray(values, np.float64).reshape(-1, 1))
    table = np.hstack(cols)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
            rec = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
            frows = np.empty(mesh.n_faces, dtype=rec)
            frows["n"] = 3
            frows["v"] = mesh.faces
            fh.write(frows.tobytes())
        else:
            lines = []
            for row in table:
                lines.append(" ".join(_fmt(x) for x in row))
            for f in mesh.faces:
                lines.append(f"3 {f[0]} {f[1]} {f[2]}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


# ------------------------------------------------------------ dispatch

_LOADERS = {"off": _load_off, "obj": _load_obj, "ply": _load_ply}


def _infer_format(path, format):
    if format is not None:
        fmt = format.lower()
    else:
        fmt = str(path).rsplit(".", 1)[-1].lower() if "." in str(path) else ""
    if fmt not in _LOADERS:
        raise FormatError(f"unsupported mesh format {fmt!r}", path)
    return fmt


def load_mesh(path, format=None):
    """Load a triangle mesh (or PLY point cloud); format from extension."""
    fmt = _infer_format(path, format)
    try:
        return _LOADERS[fmt](path)
    except OSError as exc:
        raise FormatError(str(exc), path) from exc


def save_mesh(mesh, path, format=None, binary=True):
    """Write a mesh.  PLY defaults to binary little-endian; ``binary``
    has no effect on the text formats.  Labels and scalar fields are
    written only for PLY."""
    fmt = _infer_format(path, format)
    if fmt == "off":
        _save_off(mesh, path)
    elif fmt == "obj":
        _save_obj(mesh, path)
    else:
        _save_ply(mesh, path, binary)
    return path
