"""Triangle meshes, their file formats, normals, and spatial queries.

Meshes are immutable after construction (vertex and triangle arrays are
write-protected) so they can be shared freely across threads. Coordinates
are metric millimeters throughout the package.

File formats: text OBJ and binary little-endian PLY, selected by
extension. PLY stores positions (and normals, when present) as float64,
so a save/load round trip is bit-exact; OBJ is text and round-trips
within 1e-6 mm.
"""

import logging
import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateResult,
    EmptyMesh,
    MalformedMesh,
    MissingNormals,
    UnreadableFile,
)
from .validation import check_points

logger = logging.getLogger(__name__)

# Triangles with less area than this (mm^2) are slivers and get dropped
# by the file loaders and the back-projector.
DEGENERATE_AREA = 1e-12

_UNIT_TOL = 1e-6


class TriangleMesh:
    """Vertices, triangles, and optional per-vertex unit normals.

    Parameters
    ----------
    vertices : array_like
        (n, 3) float positions in millimeters.
    triangles : array_like
        (m, 3) integer vertex indices. Every index must be < n.
    normals : array_like or None
        Optional (n, 3) per-vertex normals. Each row must be unit length
        (within 1e-6) or exactly zero; zero rows mark vertices whose
        normal is undefined (no incident triangle) and are skipped by
        descriptor computation.

    Notes
    -----
    The arrays are copied and marked read-only. Derived quantities
    (areas, spatial query structures) are cached lazily; the cache is
    safe because the mesh cannot change.
    """

    def __init__(self, vertices, triangles, normals=None):
        vertices = np.array(vertices, dtype=np.float64, order="C")
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MalformedMesh(f"vertices must be (n, 3), got {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            raise MalformedMesh("vertices contain non-finite coordinates")
        triangles = np.array(triangles, dtype=np.int32, order="C")
        if triangles.size == 0:
            triangles = triangles.reshape(0, 3)
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MalformedMesh(f"triangles must be (m, 3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MalformedMesh(
                f"triangle index out of range for {len(vertices)} vertices"
            )
        self.vertices = vertices
        self.triangles = triangles
        if normals is not None:
            normals = np.array(normals, dtype=np.float64, order="C")
            if normals.shape != vertices.shape:
                raise MalformedMesh(
                    f"normals shape {normals.shape} != vertices shape {vertices.shape}"
                )
            lengths = np.linalg.norm(normals, axis=1)
            bad = ~((np.abs(lengths - 1.0) <= _UNIT_TOL) | (lengths == 0.0))
            if np.any(bad):
                raise MalformedMesh(
                    f"{int(bad.sum())} normals are neither unit length nor zero"
                )
            normals.setflags(write=False)
        self.normals = normals
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)
        # number of degenerate triangles removed by the loader, if any
        self.dropped_degenerate = 0
        self._cache = {}

    # -- basic queries ------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def bounds(self):
        """Axis-aligned bounding box as (min_corner, max_corner)."""
        if self.num_vertices == 0:
            raise EmptyMesh("bounds of an empty mesh are undefined")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangle_corners(self):
        """(m, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def face_cross(self):
        """(m, 3) unnormalized face normals; length equals twice the area."""
        key = "face_cross"
        if key not in self._cache:
            c = self.triangle_corners()
            cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
            cross.setflags(write=False)
            self._cache[key] = cross
        return self._cache[key]

    def triangle_areas(self):
        key = "areas"
        if key not in self._cache:
            areas = 0.5 * np.linalg.norm(self.face_cross(), axis=1)
            areas.setflags(write=False)
            self._cache[key] = areas
        return self._cache[key]

    def vertex_areas(self):
        """Per-vertex surface area share: one third of each incident triangle."""
        key = "vertex_areas"
        if key not in self._cache:
            va = np.zeros(self.num_vertices)
            np.add.at(va, self.triangles.ravel(), np.repeat(self.triangle_areas() / 3.0, 3))
            va.setflags(write=False)
            self._cache[key] = va
        return self._cache[key]

    def edges_unique(self):
        """(e, 2) sorted unique undirected edges."""
        key = "edges"
        if key not in self._cache:
            t = self.triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e = np.sort(e, axis=1)
            e = np.unique(e, axis=0)
            e.setflags(write=False)
            self._cache[key] = e
        return self._cache[key]

    def mean_edge_length(self):
        e = self.edges_unique()
        if len(e) == 0:
            raise EmptyMesh("mesh has no edges")
        d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())

    def with_vertices(self, vertices, keep_normals=False):
        """New mesh with replaced vertex positions and identical topology."""
        normals = self.normals if keep_normals else None
        out = TriangleMesh(vertices, self.triangles, normals)
        return out

    def with_normals(self, normals):
        return TriangleMesh(self.vertices, self.triangles, normals)

    def same_topology(self, other):
        return (
            self.num_vertices == other.num_vertices
            and self.num_triangles == other.num_triangles
            and np.array_equal(self.triangles, other.triangles)
        )

    def submesh(self, vertex_indices):
        """Extract the mesh induced by a vertex subset.

        Triangles are kept when all three corners are selected. Returns
        the new mesh plus the original index of each kept vertex.
        """
        vertex_indices = np.asarray(vertex_indices, dtype=np.int64)
        keep = np.zeros(self.num_vertices, dtype=bool)
        keep[vertex_indices] = True
        tri_keep = keep[self.triangles].all(axis=1)
        old_tris = self.triangles[tri_keep]
        used = np.unique(np.concatenate([vertex_indices, old_tris.ravel()]))
        remap = np.full(self.num_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        sub = TriangleMesh(self.vertices[used], remap[old_tris])
        if self.normals is not None:
            sub = sub.with_normals(self.normals[used])
        return sub, used

    def __repr__(self):
        has_n = "with" if self.normals is not None else "no"
        return (
            f"TriangleMesh({self.num_vertices} vertices, "
            f"{self.num_triangles} triangles, {has_n} normals)"
        )


def clean_triangles(vertices, triangles):
    """Drop triangles with repeated indices or near-zero area.

    Returns (kept_triangles, dropped_count). Scan data routinely contains
    slivers; they are removed rather than rejected.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
    distinct = (
        (triangles[:, 0] != triangles[:, 1])
        & (triangles[:, 1] != triangles[:, 2])
        & (triangles[:, 0] != triangles[:, 2])
    )
    corners = vertices[np.clip(triangles, 0, len(vertices) - 1)]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    keep = distinct & (area > DEGENERATE_AREA)
    dropped = int((~keep).sum())
    return triangles[keep], dropped


def compute_vertex_normals(mesh):
    """Area-weighted per-vertex normals.

    Each vertex normal is the normalized sum of incident triangle cross
    products (the raw cross product has length 2*area, which realizes
    area weighting directly). Vertices with no incident triangle, or
    whose incident normals cancel, receive a zero normal that marks them
    as excluded from descriptor computation.

    Parameters
    ----------
    mesh : TriangleMesh

    Returns
    -------
    TriangleMesh
        Same geometry with fresh normals attached.
    """
    if mesh.num_triangles == 0:
        raise EmptyMesh("cannot compute normals without triangles")
    acc = np.zeros_like(mesh.vertices)
    cross = mesh.face_cross()
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], cross)
    lengths = np.linalg.norm(acc, axis=1)
    ok = lengths > 1e-12
    normals = np.zeros_like(acc)
    normals[ok] = acc[ok] / lengths[ok, None]
    return mesh.with_normals(normals)


class BarycentricLocation:
    """A point on a mesh surface: triangle index plus barycentric weights.

    Weights are non-negative and sum to 1 (within 1e-9).
    """

    __slots__ = ("triangle", "weights")

    def __init__(self, triangle, weights):
        self.triangle = int(triangle)
        w = np.asarray(weights, dtype=np.float64).reshape(3)
        if np.any(w < -1e-9):
            raise ValueError(f"barycentric weights must be non-negative: {w}")
        s = w.sum()
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"barycentric weights must sum to 1, got {s!r}")
        self.weights = np.clip(w, 0.0, None)

    def point(self, mesh):
        """World position of the location on the given mesh."""
        corners = mesh.vertices[mesh.triangles[self.triangle]]
        return self.weights @ corners

    def __repr__(self):
        return f"BarycentricLocation(triangle={self.triangle}, weights={self.weights})"


def interpolate_normal(mesh, loc):
    """Interpolate a unit normal at a barycentric location.

    The result is the barycentric-weight combination of the three corner
    vertex normals, renormalized to unit length.

    Raises
    ------
    MissingNormals
        If the mesh carries no per-vertex normals.
    DegenerateResult
        If the weighted combination is too short to normalize
        (opposing corner normals cancelling out).
    """
    if mesh.normals is None:
        raise MissingNormals("mesh has no per-vertex normals to interpolate")
    idx = mesh.triangles[loc.triangle]
    combo = loc.weights @ mesh.normals[idx]
    length = np.linalg.norm(combo)
    if length < 1e-9:
        raise DegenerateResult(
            f"interpolated normal length {length:.2e} below threshold"
        )
    return combo / length


def interpolate_normals_batch(mesh, tri_indices, weights):
    """Vectorized normal interpolation for many locations at once.

    Rows whose combination cannot be normalized come back as zero
    vectors rather than raising; callers treat those as undefined.
    """
    if mesh.normals is None:
        raise MissingNormals("mesh has no per-vertex normals to interpolate")
    idx = mesh.triangles[np.asarray(tri_indices, dtype=np.int64)]
    corner = mesh.normals[idx]  # (k, 3, 3)
    combo = np.einsum("kc,kcd->kd", np.asarray(weights, dtype=np.float64), corner)
    lengths = np.linalg.norm(combo, axis=1)
    ok = lengths > 1e-9
    out = np.zeros_like(combo)
    out[ok] = combo[ok] / lengths[ok, None]
    return out


def interpolate_positions_batch(mesh, tri_indices, weights):
    """Vectorized surface positions for (triangle, barycentric) batches."""
    idx = mesh.triangles[np.asarray(tri_indices, dtype=np.int64)]
    corner = mesh.vertices[idx]
    return np.einsum("kc,kcd->kd", np.asarray(weights, dtype=np.float64), corner)


def transform_points(points, rotation=None, translation=None, scale=1.0):
    """Apply p -> scale * R @ p + t to an (n, 3) array."""
    pts = check_points(points, "points", min_rows=0)
    out = pts
    if rotation is not None:
        out = out @ np.asarray(rotation, dtype=np.float64).T
    out = out * float(scale)
    if translation is not None:
        out = out + np.asarray(translation, dtype=np.float64).reshape(1, 3)
    return out


_OBJ_FMT = "%.8f"


def load_mesh(path):
    """Load a triangle mesh from an .obj or .ply file.

    Degenerate triangles (repeated indices or area below 1e-12 mm^2)
    are dropped; the count is logged and recorded on the returned mesh
    as ``dropped_degenerate``.

    Raises
    ------
    UnreadableFile
        Missing file or unsupported extension.
    MalformedMesh
        Out-of-range indices, non-finite coordinates, or broken layout.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such mesh file: {path}")
    ext = path.suffix.lower()
    if ext == ".obj":
        vertices, triangles, normals = _read_obj(path)
    elif ext == ".ply":
        vertices, triangles, normals = _read_ply(path)
    else:
        raise UnreadableFile(f"unsupported mesh extension {ext!r} (use .obj or .ply)")

    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(vertices)):
        raise MalformedMesh(f"{path}: non-finite vertex coordinate")
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise MalformedMesh(
            f"{path}: triangle index out of range for {len(vertices)} vertices"
        )
    triangles, dropped = clean_triangles(vertices, triangles)
    if dropped:
        logger.warning("%s: dropped %d degenerate triangles", path, dropped)
    mesh = TriangleMesh(vertices, triangles, normals)
    mesh.dropped_degenerate = dropped
    return mesh


def save_mesh(mesh, path):
    """Write a mesh to .obj (text) or .ply (binary little-endian)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        _write_obj(mesh, path)
    elif ext == ".ply":
        _write_ply(mesh, path)
    else:
        raise UnreadableFile(f"unsupported mesh extension {ext!r} (use .obj or .ply)")


# -- OBJ --------------------------------------------------------------------

def _read_obj(path):
    vertices = []
    normals = []
    faces = []
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face with fewer than 3 vertices")
                # negative indices are relative to the current vertex count
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except (ValueError, IndexError) as exc:
            raise MalformedMesh(f"{path}:{lineno}: {exc}") from exc
    if not vertices:
        raise MalformedMesh(f"{path}: no vertices")
    norm_arr = None
    if normals and len(normals) == len(vertices):
        norm_arr = _sanitize_normals(np.asarray(normals, dtype=np.float64))
    return vertices, faces, norm_arr


def _write_obj(mesh, path):
    lines = []
    for v in mesh.vertices:
        lines.append("v " + " ".join(_OBJ_FMT % x for x in v))
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append("vn " + " ".join(_OBJ_FMT % x for x in n))
        for t in mesh.triangles:
            lines.append(
                "f " + " ".join(f"{i + 1}//{i + 1}" for i in t)
            )
    else:
        for t in mesh.triangles:
            lines.append("f " + " ".join(str(i + 1) for i in t))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def _read_ply(path):
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise MalformedMesh(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(prop_name, type) or ('list', count_t, item_t, name)])
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedMesh(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt != "binary_little_endian":
        raise MalformedMesh(
            f"{path}: only binary_little_endian PLY is supported, got {fmt!r}"
        )

    vertices = None
    normals = None
    faces = []
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            if any(p[0] == "list" for p in props):
                raise MalformedMesh(f"{path}: list property on vertex element")
            codes = "".join(_PLY_TYPES[p[1]] for p in props)
            names = [p[0] for p in props]
            rec = struct.Struct("<" + codes)
            needed = rec.size * count
            if len(body) - offset < needed:
                raise MalformedMesh(f"{path}: truncated vertex data")
            rows = np.array(
                list(rec.iter_unpack(body[offset:offset + needed])), dtype=np.float64
            ).reshape(count, len(names))
            offset += needed
            cols = {nm: rows[:, i] for i, nm in enumerate(names)}
            for want in ("x", "y", "z"):
                if want not in cols:
                    raise MalformedMesh(f"{path}: vertex element lacks {want}")
            vertices = np.column_stack([cols["x"], cols["y"], cols["z"]])
            if all(k in cols for k in ("nx", "ny", "nz")):
                normals = _sanitize_normals(
                    np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
                )
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MalformedMesh(f"{path}: unsupported face properties")
            _, count_t, item_t, _ = props[0]
            cfmt = "<" + _PLY_TYPES[count_t]
            ifmt_code = _PLY_TYPES[item_t]
            csize = struct.calcsize(cfmt)
            isize = struct.calcsize("<" + ifmt_code)
            for _ in range(count):
                if len(body) - offset < csize:
                    raise MalformedMesh(f"{path}: truncated face data")
                (k,) = struct.unpack_from(cfmt, body, offset)
                offset += csize
                if len(body) - offset < k * isize:
                    raise MalformedMesh(f"{path}: truncated face data")
                idx = struct.unpack_from(f"<{k}{ifmt_code}", body, offset)
                offset += k * isize
                for j in range(1, k - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
        else:
            # skip unknown fixed-size elements
            codes = "".join(_PLY_TYPES[p[1]] for p in props if p[0] != "list")
            if len(codes) != len(props):
                raise MalformedMesh(f"{path}: cannot skip list element {name!r}")
            offset += struct.calcsize("<" + codes) * count
    if vertices is None:
        raise MalformedMesh(f"{path}: no vertex element")
    return vertices, faces, normals


def _write_ply(mesh, path):
    has_normals = mesh.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.num_vertices}"]
    header += [f"property double {p}" for p in props]
    header += [
        f"element face {mesh.num_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    parts = [("\n".join(header) + "\n").encode("ascii")]
    if has_normals:
        vdata = np.hstack([mesh.vertices, mesh.normals])
    else:
        vdata = mesh.vertices
    parts.append(np.ascontiguousarray(vdata, dtype="<f8").tobytes())
    if mesh.num_triangles:
        face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        faces = np.empty(mesh.num_triangles, dtype=face_dtype)
        faces["n"] = 3
        faces["idx"] = mesh.triangles
        parts.append(faces.tobytes())
    path.write_bytes(b"".join(parts))


def _sanitize_normals(normals):
    """Renormalize file normals; rows too short to normalize become zero.

    Rows already unit length within 1e-6 are kept untouched so that a
    save/load round trip through float64 PLY stays bit exact.
    """
    lengths = np.linalg.norm(normals, axis=1)
    out = np.zeros_like(normals)
    unit = np.abs(lengths - 1.0) <= 1e-6
    out[unit] = normals[unit]
    fix = ~unit & (lengths > 1e-12)
    out[fix] = normals[fix] / lengths[fix, None]
    return out


def closest_point_on_triangles(points, corners):
    """Exact closest point for paired (point, triangle) rows.

    Region-based closest point computation (vertex/edge/face cases)
    vectorized over rows.

    Parameters
    ----------
    points : (n, 3) array
    corners : (n, 3, 3) array
        Triangle corner positions per row.

    Returns
    -------
    dist2 : (n,) squared distances
    bary : (n, 3) barycentric weights of the closest point
    """
    p = np.asarray(points, dtype=np.float64)
    tri = np.asarray(corners, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, wa, wb, wc):
        m = mask & ~done
        if np.any(m):
            bary[m, 0] = wa[m] if isinstance(wa, np.ndarray) else wa
            bary[m, 1] = wb[m] if isinstance(wb, np.ndarray) else wb
            bary[m, 2] = wc[m] if isinstance(wc, np.ndarray) else wc
            done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        # vertex regions
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        # edge AB
        v = _safe_div(d1, d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v, v, 0.0)
        # edge AC
        w = _safe_div(d2, d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w, 0.0, w)
        # edge BC
        w = _safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w, w)
        # interior
        denom = va + vb + vc
        v = _safe_div(vb, denom)
        w = _safe_div(vc, denom)
        assign(np.ones(n, dtype=bool), 1.0 - v - w, v, w)

    closest = (
        bary[:, 0, None] * a + bary[:, 1, None] * b + bary[:, 2, None] * c
    )
    diff = p - closest
    dist2 = np.einsum("ij,ij->i", diff, diff)
    return dist2, bary


def _safe_div(num, den):
    out = np.zeros_like(num)
    ok = den != 0
    out[ok] = num[ok] / den[ok]
    return out


class MeshQuery:
    """Reusable closest-point query structure for one mesh.

    Results are identical to an exhaustive scan over all triangles,
    with ties broken toward the lowest triangle index.
    """

    def __init__(self, mesh):
        if mesh.num_triangles == 0:
            raise EmptyMesh("cannot build a spatial query for a mesh without triangles")
        self.mesh = mesh
        corners = mesh.triangle_corners()
        self._corners = corners
        self._centroids = corners.mean(axis=1)
        # largest centroid-to-corner distance bounds how far a triangle
        # surface can extend past its centroid
        spread = np.linalg.norm(
            corners - self._centroids[:, None, :], axis=2
        ).max(axis=1)
        self._max_spread = float(spread.max())
        self._tree = cKDTree(self._centroids)

    def query(self, points):
        """Closest triangle, squared distance, and barycentric weights.

        Parameters
        ----------
        points : (q, 3) array

        Returns
        -------
        tri_idx : (q,) int triangle indices
        dist2 : (q,) squared distances in mm^2
        bary : (q, 3) barycentric weights
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = len(pts)
        ntri = len(self._centroids)
        tri_idx = np.zeros(q, dtype=np.int64)
        dist2 = np.full(q, np.inf)
        bary = np.zeros((q, 3))

        pending = np.arange(q)
        k = min(8, ntri)
        while len(pending):
            sub = pts[pending]
            cd, cand = self._tree.query(sub, k=k)
            if k == 1:
                cd = cd[:, None]
                cand = cand[:, None]
            flat_pts = np.repeat(sub, k, axis=0)
            flat_tris = self._corners[cand.ravel()]
            d2, bw = closest_point_on_triangles(flat_pts, flat_tris)
            d2 = d2.reshape(len(sub), k)
            bw = bw.reshape(len(sub), k, 3)
            # lowest (distance, triangle index) pair wins
            order = np.lexsort((cand, d2), axis=1)
            best = order[:, 0]
            rows = np.arange(len(sub))
            tri_idx[pending] = cand[rows, best]
            dist2[pending] = d2[rows, best]
            bary[pending] = bw[rows, best]
            if k >= ntri:
                break
            # prove optimality: anything beyond the k-th centroid cannot
            # come closer than (k-th centroid distance - max spread)
            bound = cd[:, -1] - self._max_spread
            proven = np.sqrt(dist2[pending]) < bound
            pending = pending[~proven]
            k = min(k * 4, ntri)
        return tri_idx, dist2, bary


def nearest_triangle(mesh, query_point):
    """Closest triangle and surface point for a single query.

    Returns (BarycentricLocation, distance in mm). The spatial index is
    cached on the mesh, so repeated calls on the same mesh are cheap.
    """
    if mesh.num_triangles == 0:
        raise EmptyMesh("nearest_triangle on a mesh without triangles")
    mq = mesh._cache.get("mesh_query")
    if mq is None:
        mq = MeshQuery(mesh)
        mesh._cache["mesh_query"] = mq
    tri, d2, bw = mq.query(np.asarray(query_point, dtype=np.float64).reshape(1, 3))
    loc = BarycentricLocation(tri[0], _snap_weights(bw[0]))
    return loc, float(np.sqrt(d2[0]))


def _snap_weights(w):
    w = np.clip(w, 0.0, 1.0)
    s = w.sum()
    return w / s if s > 0 else np.array([1.0, 0.0, 0.0])
