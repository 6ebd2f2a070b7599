"""ASCII OBJ meshes, ASCII XYZ clouds and binary little-endian PLY clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import GeometryError
from .geometry import PointCloud, TriangleMesh


def load_obj(path) -> TriangleMesh:
    """Read ``v``/``f`` records; polygons are fan-triangulated, degenerate faces dropped."""
    verts, tris = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise GeometryError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    # negative indices are relative to the end of the vertex list
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise GeometryError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not tris:
        raise GeometryError(f"{path}: no geometry found")
    mesh = TriangleMesh(np.array(verts), np.array(tris))
    return mesh.cleaned()


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def save_xyz(cloud: PointCloud, path) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.9g")


def load_xyz(path) -> PointCloud:
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return PointCloud(np.zeros((0, 3)))
    if data.shape[1] not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    if data.shape[1] == 6:
        return PointCloud(data[:, :3], data[:, 3:])
    return PointCloud(data)


def save_ply(cloud: PointCloud, path) -> None:
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def load_ply(path) -> PointCloud:
    """Read the vertex element of a binary little-endian PLY file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise GeometryError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in [ln.strip() for ln in lines]:
        raise GeometryError(f"{path}: only binary_little_endian PLY is supported")
    count, fields, in_vertex = 0, [], False
    for ln in lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise GeometryError(f"{path}: list properties on vertices are not supported")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    dtype = np.dtype(fields)
    need = count * dtype.itemsize
    if len(raw) - body_start < need:
        raise GeometryError(f"{path}: truncated vertex data")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    pts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    names = dtype.names
    if all(n in names for n in ("nx", "ny", "nz")):
        nrm = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
        return PointCloud(pts, nrm)
    return PointCloud(pts)


def save_cloud(cloud: PointCloud, path) -> None:
    if str(path).endswith(".ply"):
        save_ply(cloud, path)
    else:
        save_xyz(cloud, path)


def load_cloud(path) -> PointCloud:
    if str(path).endswith(".ply"):
        return load_ply(path)
    return load_xyz(path)

