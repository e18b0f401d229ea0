"""PLY and PCD readers/writers for point clouds.

PLY files carry ``x y z`` as float32, optionally ``nx ny nz curvature``,
``red green blue`` as uchar, and any extra float32 scalar properties
(e.g. ``cost``).  Both ASCII and binary little-endian encodings are read and
written.  PCD support is ASCII only.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .cloud import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class CloudFormatError(ValueError):
    """Raised when a point cloud file is malformed."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _ply_columns(cloud: PointCloud, colors, extra) -> list[tuple[str, str, np.ndarray]]:
    cols = [(name, "float", cloud.points[:, i]) for i, name in enumerate("xyz")]
    if cloud.normals is not None:
        cols += [(name, "float", cloud.normals[:, i]) for i, name in enumerate(("nx", "ny", "nz"))]
    if cloud.curvature is not None:
        cols.append(("curvature", "float", cloud.curvature))
    if colors is not None:
        rgb = np.asarray(colors)
        if rgb.shape != (len(cloud), 3):
            raise ValueError(f"colors must be shaped ({len(cloud)}, 3)")
        if rgb.min(initial=0) < 0 or rgb.max(initial=0) > 255:
            raise ValueError("colors must lie in [0, 255]")
        cols += [(name, "uchar", rgb[:, i]) for i, name in enumerate(("red", "green", "blue"))]
    for name, values in (extra or {}).items():
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(values) != len(cloud):
            raise ValueError(f"extra property {name!r} has wrong length")
        cols.append((name, "float", values))
    return cols


def ply_bytes(cloud: PointCloud, colors=None, extra=None, binary=True, comments=()) -> bytes:
    cols = _ply_columns(cloud, colors, extra)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {len(cloud)}")
    header += [f"property {kind} {name}" for name, kind, _ in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(name, "<" + _PLY_TYPES[kind]) for name, kind, _ in cols])
        rec = np.empty(len(cloud), dtype=dtype)
        for name, _, values in cols:
            rec[name] = values
        return head + rec.tobytes()
    lines = []
    for i in range(len(cloud)):
        parts = []
        for _, kind, values in cols:
            v = values[i]
            parts.append(str(int(v)) if kind == "uchar" else repr(float(np.float32(v))))
        lines.append(" ".join(parts))
    return head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def write_ply(path, cloud: PointCloud, colors=None, extra=None, binary=True, comments=()) -> None:
    atomic_write_bytes(path, ply_bytes(cloud, colors, extra, binary, comments))


def read_ply_table(path) -> tuple[dict[str, np.ndarray], list[str]]:
    """Read the vertex element of a PLY file into named columns plus comments."""
    data = Path(path).read_bytes()
    marker = data.find(b"end_header")
    if not data.startswith(b"ply") or marker < 0:
        raise CloudFormatError(f"{path}: not a PLY file (missing header)")
    eol = data.find(b"\n", marker)
    header = data[:marker].decode("ascii", errors="replace").splitlines()
    body = data[eol + 1:]
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    comments: list[str] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except (IndexError, ValueError) as exc:
                    raise CloudFormatError(f"{path}: bad vertex count") from exc
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise CloudFormatError(f"{path}: unsupported property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if count is None:
        raise CloudFormatError(f"{path}: missing vertex element")
    names = [p for p, _ in props]
    for axis in "xyz":
        if axis not in names:
            raise CloudFormatError(f"{path}: missing property {axis!r}")
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if len(body) < dtype.itemsize * count:
            raise CloudFormatError(f"{path}: truncated vertex data")
        rec = np.frombuffer(body, dtype=dtype, count=count)
        table = {name: rec[name].copy() for name in names}
    elif fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise CloudFormatError(f"{path}: expected {count} vertices, found {len(rows)}")
        try:
            arr = np.array([r.split() for r in rows[:count]], dtype=np.float64).reshape(count, len(props))
        except ValueError as exc:
            raise CloudFormatError(f"{path}: malformed vertex row") from exc
        table = {name: arr[:, i].astype(t) for i, (name, t) in enumerate(props)}
    else:
        raise CloudFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return table, comments


def cloud_from_table(table: dict[str, np.ndarray]) -> PointCloud:
    pts = np.stack([table[a] for a in "xyz"], axis=1).astype(np.float64)
    normals = None
    if all(k in table for k in ("nx", "ny", "nz")):
        normals = np.stack([table[k] for k in ("nx", "ny", "nz")], axis=1).astype(np.float64)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm == 0, 1.0, norm)
    curv = table["curvature"].astype(np.float64) if "curvature" in table else None
    return PointCloud(pts, normals, curv)


def read_ply(path) -> PointCloud:
    table, _ = read_ply_table(path)
    return cloud_from_table(table)


def read_ply_colors(path) -> np.ndarray | None:
    table, _ = read_ply_table(path)
    if not all(k in table for k in ("red", "green", "blue")):
        return None
    return np.stack([table[k] for k in ("red", "green", "blue")], axis=1).astype(np.uint8)


_PCD_FEATURES = ("normal_x", "normal_y", "normal_z", "curvature")


def write_pcd(path, cloud: PointCloud) -> None:
    fields = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.has_features:
        fields += list(_PCD_FEATURES)
        cols += [cloud.normals, cloud.curvature.reshape(-1, 1)]
    data = np.concatenate(cols, axis=1) if len(cloud) else np.zeros((0, len(fields)))
    n = len(cloud)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(["4"] * len(fields)),
        "TYPE " + " ".join(["F"] * len(fields)),
        "COUNT " + " ".join(["1"] * len(fields)),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    body = "\n".join(" ".join(repr(float(np.float32(v))) for v in row) for row in data)
    atomic_write_bytes(path, ("\n".join(header) + "\n" + body + ("\n" if n else "")).encode("ascii"))


def read_pcd(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    fields = None
    n_points = None
    start = None
    for i, line in enumerate(lines):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        key = tok[0].upper()
        if key == "FIELDS":
            fields = tok[1:]
        elif key == "POINTS":
            n_points = int(tok[1])
        elif key == "DATA":
            if tok[1].lower() != "ascii":
                raise CloudFormatError(f"{path}: only ascii PCD is supported")
            start = i + 1
            break
    if fields is None or start is None:
        raise CloudFormatError(f"{path}: malformed PCD header")
    for axis in "xyz":
        if axis not in fields:
            raise CloudFormatError(f"{path}: missing field {axis!r}")
    rows = [r.split() for r in lines[start:] if r.strip()]
    if n_points is not None and len(rows) != n_points:
        raise CloudFormatError(f"{path}: expected {n_points} points, found {len(rows)}")
    try:
        arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(fields))
    except ValueError as exc:
        raise CloudFormatError(f"{path}: malformed data row") from exc
    col = {f: arr[:, i] for i, f in enumerate(fields)}
    pts = np.stack([col[a] for a in "xyz"], axis=1)
    if all(f in col for f in _PCD_FEATURES):
        normals = np.stack([col[f] for f in _PCD_FEATURES[:3]], axis=1)
        normals /= np.where(np.linalg.norm(normals, axis=1, keepdims=True) == 0, 1.0,
                            np.linalg.norm(normals, axis=1, keepdims=True))
        return PointCloud(pts, normals, col["curvature"])
    return PointCloud(pts)
