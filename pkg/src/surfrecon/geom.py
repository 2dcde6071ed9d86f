"""Point clouds, triangle meshes, PLY I/O and basic spatial queries.

Model units are centimetres throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, QhullError

from . import kernels

N_LANDMARKS = 12


class GeometryError(ValueError):
    pass


class PlyError(ValueError):
    pass


@dataclass
class PointCloud:
    """Unordered 3D points with optional per-point normals.

    Normals are unit length, except that a zero vector marks a point whose
    normal could not be estimated.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise GeometryError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError("normal count must equal point count")
            norms = np.linalg.norm(self.normals, axis=1)
            if not (np.isclose(norms, 1.0, atol=1e-6) | (norms == 0.0)).all():
                raise GeometryError("normals must be unit vectors")

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], None if self.normals is None else self.normals[idx])


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    landmark_indices: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise GeometryError("vertex coordinates must be finite")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        if self.landmark_indices is not None:
            lm = np.asarray(self.landmark_indices, dtype=np.int64)
            if lm.shape != (N_LANDMARKS,):
                raise GeometryError(f"expected exactly {N_LANDMARKS} landmark indices")
            if lm.min() < 0 or lm.max() >= len(self.vertices):
                raise GeometryError("landmark index out of range")
            self.landmark_indices = lm

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.faces, self.landmark_indices)

    @property
    def landmarks(self):
        return self.vertices[self.landmark_indices]


# ------------------------------------------------------------------ PLY I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    line = fh.readline()
    if line.strip() != b"ply":
        raise PlyError("malformed header: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("malformed header: missing end_header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"malformed header: unsupported format {' '.join(tok[1:])!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"malformed header: bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError("malformed header: property before element")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed header: bad list property {line!r}")
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise PlyError(f"malformed header: bad property {line!r}")
                elements[-1][2].append((tok[2], "scalar", _PLY_TYPES[tok[1]], None))
        else:
            raise PlyError(f"malformed header: unknown keyword {tok[0]!r}")
    if fmt is None:
        raise PlyError("malformed header: missing format line")
    return fmt, elements


def _read_ascii(fh, elements):
    tokens = fh.read().split()
    pos = 0
    data = {}
    for name, count, props in elements:
        if all(kind == "scalar" for _, kind, _, _ in props):
            width = len(props)
            chunk = tokens[pos:pos + count * width]
            if len(chunk) != count * width:
                raise PlyError(f"unexpected end of data in element {name!r}")
            arr = np.array(chunk, dtype=np.float64).reshape(count, width)
            data[name] = {p[0]: arr[:, j] for j, p in enumerate(props)}
            pos += count * width
            continue
        rows = {p[0]: [] for p in props}
        for _ in range(count):
            for pname, kind, _, _ in props:
                if kind == "list":
                    n = int(tokens[pos])
                    rows[pname].append([int(t) for t in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                else:
                    rows[pname].append(float(tokens[pos]))
                    pos += 1
        data[name] = rows
    return data


def _read_binary(fh, elements):
    buf = fh.read()
    off = 0
    data = {}
    for name, count, props in elements:
        if all(kind == "scalar" for _, kind, _, _ in props):
            dt = np.dtype([(p[0], "<" + p[2]) for p in props])
            if off + dt.itemsize * count > len(buf):
                raise PlyError(f"unexpected end of data in element {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            data[name] = {p[0]: arr[p[0]].astype(np.float64) for p in props}
            continue
        rows = {p[0]: [] for p in props}
        for _ in range(count):
            for pname, kind, t0, t1 in props:
                if kind == "list":
                    cdt = np.dtype("<" + t0)
                    n = int(np.frombuffer(buf, cdt, 1, off)[0])
                    off += cdt.itemsize
                    idt = np.dtype("<" + t1)
                    rows[pname].append(np.frombuffer(buf, idt, n, off).astype(np.int64).tolist())
                    off += idt.itemsize * n
                else:
                    sdt = np.dtype("<" + t0)
                    rows[pname].append(float(np.frombuffer(buf, sdt, 1, off)[0]))
                    off += sdt.itemsize
        data[name] = rows
    return data


def read_ply(path):
    """Read a PLY file. Returns a :class:`TriMesh` if it has faces, else a :class:`PointCloud`."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        data = _read_ascii(fh, elements) if fmt == "ascii" else _read_binary(fh, elements)
    if "vertex" not in data:
        raise PlyError("malformed header: no vertex element")
    v = data["vertex"]
    try:
        pts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    except KeyError:
        raise PlyError("malformed header: vertex element lacks x/y/z") from None
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(np.float64)
    faces = data.get("face")
    if faces:
        lists = faces.get("vertex_indices", faces.get("vertex_index"))
        if lists is None:
            raise PlyError("malformed header: face element lacks vertex_indices")
        tris = []
        for f in lists:
            # fan-triangulate polygons
            for j in range(1, len(f) - 1):
                tris.append((f[0], f[j], f[j + 1]))
        tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
        if len(tris) and (tris.min() < 0 or tris.max() >= len(pts)):
            raise PlyError("face vertex index out of range")
        return TriMesh(pts, tris)
    return PointCloud(pts, normals)


def write_ply(path, obj, binary=False):
    """Write a :class:`PointCloud` or :class:`TriMesh`.

    ASCII output uses 17 significant digits so coordinates round-trip exactly.
    """
    if isinstance(obj, TriMesh):
        pts, normals, faces = obj.vertices, None, obj.faces
    elif isinstance(obj, PointCloud):
        pts, normals, faces = obj.points, obj.normals, None
    else:
        raise TypeError("expected a PointCloud or TriMesh")
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(pts)}"]
    header += [f"property double {p}" for p in props]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    cols = pts if normals is None else np.hstack([pts, normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                rec["n"] = 3
                rec["v"] = faces
                fh.write(rec.tobytes())
        else:
            lines = [" ".join(f"{c:.17g}" for c in row) for row in cols.tolist()]
            if faces is not None:
                lines += [f"3 {a} {b} {c}" for a, b, c in faces.tolist()]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def ply_io(path, mode, cloud_or_mesh=None, binary=False):
    if mode == "read":
        return read_ply(path)
    if mode == "write":
        write_ply(path, cloud_or_mesh, binary=binary)
        return None
    raise ValueError("mode must be 'read' or 'write'")


# ------------------------------------------------------------ spatial index

class SpatialIndex:
    """Immutable kd-tree; nearest-neighbour ties resolve to the smallest index."""

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else points
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("cannot build an index over an empty cloud")
        self._tree = kernels.KDTree(pts)

    @property
    def points(self):
        return self._tree.data

    def __len__(self):
        return self._tree.n

    def nn_query(self, q):
        """Nearest point to a single query: ``(index, squared_distance)``."""
        idx, d2 = self._tree.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(d2[0])

    def query(self, queries):
        """Vectorised nearest neighbours for an (m, 3) array."""
        return self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3))

    def knn(self, queries, k):
        return self._tree.query_knn(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k)


def build_index(cloud):
    return SpatialIndex(cloud)


def nn_query(index, q):
    return index.nn_query(q)


# ------------------------------------------------------------------ normals

def estimate_normals(cloud, k=8, return_flags=False):
    """PCA normals from the ``k`` nearest neighbours (the point included).

    Signs point away from the centroid of the whole cloud. Neighbourhoods of
    rank < 2 get a zero normal and are flagged.
    """
    pts = cloud.points
    if k < 3:
        raise GeometryError("k must be at least 3")
    if len(pts) < k:
        raise GeometryError("cloud has fewer than k points")
    idx, _ = SpatialIndex(pts).knn(pts, k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], np.finfo(float).tiny)
    degenerate = w[:, 1] <= 1e-10 * scale + 1e-300
    outward = pts - pts.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    out = PointCloud(pts.copy(), normals)
    return (out, degenerate) if return_flags else out


# ------------------------------------------------------ hidden point removal

def single_view_sample(cloud, camera_position, flip_factor=100.0):
    """Points visible from ``camera_position`` via spherical-flip hidden point removal."""
    pts = cloud.points
    cam = np.asarray(camera_position, dtype=np.float64).reshape(3)
    if len(pts) == 0:
        raise GeometryError("empty cloud")
    center = pts.mean(axis=0)
    bound = np.sqrt(((pts - center) ** 2).sum(axis=1).max())
    if np.linalg.norm(cam - center) <= bound:
        raise GeometryError("camera lies inside the cloud's bounding sphere")
    if len(pts) < 4:
        return cloud.subset(np.arange(len(pts)))
    rel = pts - cam
    norm = np.linalg.norm(rel, axis=1, keepdims=True)
    radius = flip_factor * norm.max()
    flipped = rel + 2.0 * (radius - norm) * rel / norm
    hull_pts = np.vstack([flipped, np.zeros(3)])
    try:
        hull = ConvexHull(hull_pts)
    except QhullError:
        hull = ConvexHull(hull_pts, qhull_options="QJ")
    visible = np.sort(hull.vertices[hull.vertices < len(pts)])
    return cloud.subset(visible)


# ----------------------------------------------------------------- topology

class MeshTopology(NamedTuple):
    edges: np.ndarray          # (E, 2), i < j, lexicographically sorted
    laplacian: sp.csr_matrix   # row i: mean of neighbours - vertex i
    isolated: np.ndarray       # vertices with no incident face (zero rows)
    adjacency: sp.csr_matrix

    def apply_laplacian(self, values):
        """Mean of neighbour differences; exact zero on constant inputs."""
        values = np.asarray(values, dtype=np.float64)
        adj = self.adjacency
        deg = np.diff(adj.indptr)
        rows = np.repeat(np.arange(len(deg)), deg)
        diffs = values[adj.indices] - values[rows]
        out = np.zeros_like(values)
        ok = deg > 0
        sums = np.add.reduceat(diffs, adj.indptr[:-1][ok], axis=0)
        out[ok] = sums / deg[ok].reshape((-1,) + (1,) * (values.ndim - 1))
        return out


def mesh_edges(faces):
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def mesh_topology(mesh):
    n = len(mesh.vertices)
    edges = mesh_edges(mesh.faces)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = deg == 0
    inv = np.zeros(n)
    inv[~isolated] = 1.0 / deg[~isolated]
    lap = sp.diags(inv) @ adj - sp.diags((~isolated).astype(np.float64))
    return MeshTopology(edges, sp.csr_matrix(lap), isolated, adj)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals from consistently wound faces."""
    v = np.asarray(vertices)
    f = np.asarray(faces)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    out = np.zeros_like(v)
    for c in range(3):
        np.add.at(out, f[:, c], fn)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)
