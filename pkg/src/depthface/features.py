"""Retrieval descriptors: pseudo-landmark grids, orientation histograms,
and the combined per-part distance.

A pseudo-landmark grid slices a mesh with (m+2) parallel planes
perpendicular to the sellion-to-chin axis (the two base planes pass
through the anchors) and resamples each section's front-facing contour
arc to n points at uniform arc length, ordered by increasing x. An
orientation histogram bins per-vertex normal directions by azimuth and
elevation, weighted by feather weight times the vertex's area share.
The per-part distance combines the squared grid difference with a
chi-square histogram distance scaled by a per-part weight.
"""

import json
import struct
import logging
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometry,
    EmptyPart,
    EmptySection,
    MissingNormals,
    ShapeMismatch,
    UnreadableFile,
    ZeroVector,
)

logger = logging.getLogger(__name__)

PART_NAMES = ("eyes", "nose", "mouth", "left_cheek", "right_cheek")

# Per-part weight on the histogram term: flatter parts lean on point
# positions, high-curvature parts lean on normal statistics.
DEFAULT_ALPHA = {
    "left_cheek": 1.0,
    "right_cheek": 1.0,
    "nose": 2.0,
    "eyes": 4.0,
    "mouth": 10.0,
}

DEFAULT_BINS = 32
DEFAULT_M = 33
DEFAULT_N = 35


class PartMask:
    """Named vertex subset of a mesh with per-vertex feather weights.

    Weights are 1 in the part interior and decay to 0 over the boundary
    band; interiors of distinct parts never overlap.
    """

    __slots__ = ("name", "vertices", "feather")

    def __init__(self, name, vertices, feather):
        if name not in PART_NAMES:
            raise ValueError(f"unknown part name {name!r}; expected one of {PART_NAMES}")
        vertices = np.asarray(vertices, dtype=np.int64).reshape(-1)
        feather = np.asarray(feather, dtype=np.float64).reshape(-1)
        if len(vertices) != len(feather):
            raise ValueError("vertices and feather weights disagree in length")
        if len(np.unique(vertices)) != len(vertices):
            raise ValueError(f"part {name!r} lists a vertex twice")
        if np.any(vertices < 0):
            raise ValueError(f"part {name!r} has a negative vertex index")
        if np.any(feather < 0) or np.any(feather > 1):
            raise ValueError(f"part {name!r} feather weights must lie in [0, 1]")
        self.name = name
        self.vertices = vertices
        self.feather = feather

    def __len__(self):
        return len(self.vertices)

    def interior(self):
        """Vertices at full weight."""
        return self.vertices[self.feather >= 1.0 - 1e-12]


def validate_part_masks(masks):
    """Check that part interiors are pairwise disjoint."""
    seen = {}
    for mask in masks:
        for v in mask.interior():
            v = int(v)
            if v in seen and seen[v] != mask.name:
                raise ValueError(
                    f"vertex {v} is interior to both {seen[v]!r} and {mask.name!r}"
                )
            seen[v] = mask.name
    return masks


def load_part_masks(path):
    """Load part masks from JSON {part: {"vertices": [...], "weights": [...]}}."""
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such mask file: {path}")
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot parse masks {path}: {exc}") from exc
    masks = [
        PartMask(name, entry["vertices"], entry["weights"])
        for name, entry in sorted(raw.items())
    ]
    return validate_part_masks(masks)


def save_part_masks(masks, path):
    payload = {
        mask.name: {
            "vertices": [int(v) for v in mask.vertices],
            "weights": [float(w) for w in mask.feather],
        }
        for mask in masks
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class PseudoLandmarkGrid:
    """(m+2) x n ordered contour samples, row-major from sellion to chin."""

    __slots__ = ("m", "n", "points", "empty_rows")

    def __init__(self, m, n, points, empty_rows=()):
        self.m = int(m)
        self.n = int(n)
        points = np.asarray(points, dtype=np.float64)
        expected = (self.m + 2) * self.n
        if points.shape != (expected, 3):
            raise ShapeMismatch(
                f"grid for m={m}, n={n} needs {expected} points, "
                f"got shape {points.shape}"
            )
        if not np.all(np.isfinite(points)):
            raise ShapeMismatch("grid points must be finite")
        self.points = points
        self.empty_rows = tuple(int(r) for r in empty_rows)

    @property
    def num_points(self):
        return len(self.points)

    def rows(self):
        return self.points.reshape(self.m + 2, self.n, 3)


def sample_pseudo_landmarks(mesh, sellion, chin, m=DEFAULT_M, n=DEFAULT_N):
    """Slice a mesh into an (m+2) x n pseudo-landmark grid.

    Planes are perpendicular to the sellion-to-chin axis at evenly
    spaced offsets including the two base planes through the anchors.
    Each plane's cross-section keeps the contour component with the
    largest extent along +z (the viewer axis, with the farthest +z
    reach as tiebreak); closed loops are split at their extreme-x
    points and the front (larger mean z) arc kept. The arc is
    resampled to n points at uniform arc length, ordered by increasing
    x. Planes that miss the mesh produce rows copied from the nearest
    valid row and projected onto the empty plane; such rows are listed
    in ``empty_rows``.

    Raises
    ------
    DegenerateGeometry
        Coincident anchors.
    EmptySection
        No plane intersects the mesh at all.
    """
    sellion = np.asarray(sellion, dtype=np.float64).reshape(3)
    chin = np.asarray(chin, dtype=np.float64).reshape(3)
    axis = chin - sellion
    length = np.linalg.norm(axis)
    if length < 1e-9:
        raise DegenerateGeometry("sellion and chin coincide; no slicing axis")
    if n < 2:
        raise ValueError(f"need at least 2 samples per plane, got n={n}")
    axis_unit = axis / length

    lo, hi = mesh.bounds()
    scale = float(np.linalg.norm(hi - lo))
    signed = (mesh.vertices - sellion) @ axis_unit
    # nudge exactly-on-plane vertices so every section is transversal
    eps = max(scale, length) * 1e-9

    rows = np.zeros((m + 2, n, 3))
    filled = np.zeros(m + 2, dtype=bool)
    offsets = length * np.arange(m + 2) / (m + 1)
    for k, offset in enumerate(offsets):
        s = signed - offset
        s = np.where(np.abs(s) < eps, eps, s)
        arc = _front_arc(mesh, s)
        if arc is None:
            continue
        rows[k] = _resample_polyline(arc, n)
        filled[k] = True

    if not filled.any():
        raise EmptySection("no slicing plane intersects the mesh")
    empty = np.flatnonzero(~filled)
    if len(empty):
        valid = np.flatnonzero(filled)
        for k in empty:
            donor = valid[np.argmin(np.abs(valid - k))]
            shift = (offsets[k] - offsets[donor]) * axis_unit
            rows[k] = rows[donor] + shift
            # re-project exactly onto plane k in case the donor row
            # drifted off its own plane during resampling
            gap = (rows[k] - (sellion + offsets[k] * axis_unit)) @ axis_unit
            rows[k] -= gap[:, None] * axis_unit
        logger.debug("filled %d empty grid rows from neighbors", len(empty))
    return PseudoLandmarkGrid(m, n, rows.reshape(-1, 3), empty_rows=empty)


def _front_arc(mesh, s):
    """Extract the viewer-facing contour arc of one plane section.

    ``s`` holds strictly nonzero signed distances. Returns an ordered
    (k, 3) polyline or None when the plane misses the mesh.
    """
    tri = mesh.triangles
    tri_s = s[tri]
    sign = tri_s > 0
    crossing = ~(sign.all(axis=1) | (~sign).all(axis=1))
    if not crossing.any():
        return None
    cut = tri[crossing]

    # each cut triangle contributes one segment joining its two cut edges
    nodes = {}
    points = []
    links = []
    for corners in cut:
        ends = []
        for a, b in ((corners[0], corners[1]), (corners[1], corners[2]),
                     (corners[2], corners[0])):
            sa, sb = s[a], s[b]
            if (sa > 0) == (sb > 0):
                continue
            key = (a, b) if a < b else (b, a)
            node = nodes.get(key)
            if node is None:
                t = sa / (sa - sb)
                nodes[key] = node = len(points)
                points.append(mesh.vertices[a] + t * (mesh.vertices[b] - mesh.vertices[a]))
            ends.append(node)
        if len(ends) == 2:
            links.append(ends)

    points = np.asarray(points)
    neighbors = [[] for _ in range(len(points))]
    for a, b in links:
        neighbors[a].append(b)
        neighbors[b].append(a)

    components = _chain_components(neighbors)
    # keep the component with the largest extent along +z; a pure
    # max-z rule lets millimeter slivers at a ragged patch boundary
    # outrank the substantive arc, which makes part grids jump between
    # fragments under small shape perturbations
    def _extent(comp):
        z = points[comp[0], 2]
        return (z.max() - z.min(), z.max())

    best = max(components, key=_extent)
    chain, closed = best
    if closed:
        arc_idx = _front_half_of_loop(points, chain)
    else:
        arc_idx = chain
    arc = points[arc_idx]
    if arc[0, 0] > arc[-1, 0] or (
        arc[0, 0] == arc[-1, 0] and tuple(arc[0]) > tuple(arc[-1])
    ):
        arc = arc[::-1]
    return arc


def _chain_components(neighbors):
    """Split a degree-<=2 node graph into chains and loops.

    Returns a list of ((ordered node array, closed flag)) pairs, walked
    deterministically: open chains start at their lowest-id endpoint,
    loops at their lowest-id node toward its lower-id neighbor.
    """
    n = len(neighbors)
    seen = np.zeros(n, dtype=bool)
    components = []

    def walk(start, first):
        order = [start, first]
        seen[start] = seen[first] = True
        prev, cur = start, first
        while True:
            nxt = [x for x in neighbors[cur] if x != prev]
            if not nxt or seen[nxt[0]] and nxt[0] == start:
                closed = bool(nxt) and nxt[0] == start
                return np.array(order), closed
            prev, cur = cur, nxt[0]
            if seen[cur]:
                return np.array(order), False
            seen[cur] = True
            order.append(cur)

    endpoints = sorted(i for i in range(n) if len(neighbors[i]) == 1)
    for e in endpoints:
        if not seen[e]:
            components.append(walk(e, neighbors[e][0]))
    for i in range(n):
        if not seen[i] and neighbors[i]:
            components.append(walk(i, min(neighbors[i])))
    for i in range(n):
        if not seen[i]:
            components.append((np.array([i]), False))
    return components


def _front_half_of_loop(points, chain):
    """Split a closed contour at its extreme-x nodes; keep the front arc."""
    xs = points[chain, 0]
    lo = int(np.argmin(xs))
    hi = int(np.argmax(xs))
    if lo == hi:
        return chain
    a, b = sorted((lo, hi))
    arc1 = chain[a:b + 1]
    arc2 = np.concatenate([chain[b:], chain[:a + 1]])
    if points[arc1, 2].mean() >= points[arc2, 2].mean():
        return arc1
    return arc2


def _resample_polyline(arc, n):
    """n points at uniform arc length along an ordered polyline."""
    if len(arc) == 1:
        return np.repeat(arc, n, axis=0)
    seg = np.linalg.norm(np.diff(arc, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return np.repeat(arc[:1], n, axis=0)
    stations = total * np.arange(n) / (n - 1)
    return np.column_stack(
        [np.interp(stations, cum, arc[:, k]) for k in range(3)]
    )


def pts_distance(a, b):
    """Sum of squared point distances between two grids of equal shape."""
    if (a.m, a.n) != (b.m, b.n):
        raise ShapeMismatch(
            f"grid shapes differ: ({a.m}, {a.n}) vs ({b.m}, {b.n})"
        )
    diff = a.points - b.points
    return float((diff * diff).sum())


def azimuth_elevation(normal):
    """Azimuth and elevation angles of a direction vector.

    Azimuth is the two-argument arctangent of (n_z, n_x), in [-pi, pi];
    at the poles (n_x = n_z = 0) it is 0. Elevation is
    arctan(n_y / sqrt(n_x^2 + n_z^2)), in [-pi/2, pi/2]. Both depend
    only on direction, so any positive scaling of the input leaves them
    unchanged.

    Raises
    ------
    ZeroVector
    """
    normal = np.asarray(normal, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(normal)):
        raise ZeroVector("direction vector must be finite")
    nx, ny, nz = normal
    planar = np.hypot(nx, nz)
    if planar == 0.0 and ny == 0.0:
        raise ZeroVector("cannot orient a zero vector")
    theta = np.arctan2(nz, nx)
    phi = np.arctan2(ny, planar)
    return float(theta), float(phi)


class AEHistogram:
    """Azimuth-elevation orientation histogram.

    ``bins[i, j]`` covers azimuth cell i over [-pi, pi] and elevation
    cell j over [-pi/2, pi/2]. Bins sum to 1 unless the histogram is
    flagged empty (all zero).
    """

    __slots__ = ("bins",)

    def __init__(self, bins):
        bins = np.asarray(bins, dtype=np.float64)
        if bins.ndim != 2:
            raise ShapeMismatch(f"histogram must be 2D, got shape {bins.shape}")
        if np.any(bins < 0):
            raise ValueError("histogram bins must be non-negative")
        total = bins.sum()
        if total != 0 and abs(total - 1.0) > 1e-9:
            raise ValueError(f"histogram must sum to 1 or be empty, got {total!r}")
        self.bins = bins

    @property
    def shape(self):
        return self.bins.shape

    @property
    def empty(self):
        return bool(self.bins.sum() == 0)


def ae_histogram(mesh, mask, bins=DEFAULT_BINS):
    """Orientation histogram of a part's vertex normals.

    Each masked vertex with a usable (nonzero) normal contributes its
    feather weight times its area share to the bin of its azimuth and
    elevation. The result is normalized to sum 1.

    Raises
    ------
    MissingNormals
        Mesh has no vertex normals.
    EmptyPart
        Mask selects no vertex with a usable normal and positive weight.
    """
    if mesh.normals is None:
        raise MissingNormals("orientation histogram needs vertex normals")
    if len(mask) == 0:
        raise EmptyPart(f"part {mask.name!r} selects no vertices")
    normals = mesh.normals[mask.vertices]
    lengths = np.linalg.norm(normals, axis=1)
    areas = mesh.vertex_areas()[mask.vertices]
    weight = mask.feather * areas
    usable = (lengths > 1e-9) & (weight > 0)
    if not usable.any():
        raise EmptyPart(
            f"part {mask.name!r} has no vertex with a usable normal"
        )
    normals = normals[usable]
    weight = weight[usable]
    theta = np.arctan2(normals[:, 2], normals[:, 0])
    phi = np.arctan2(normals[:, 1], np.hypot(normals[:, 0], normals[:, 2]))
    ti = np.clip(
        ((theta + np.pi) / (2 * np.pi) * bins).astype(np.int64), 0, bins - 1
    )
    pi_ = np.clip(
        ((phi + np.pi / 2) / np.pi * bins).astype(np.int64), 0, bins - 1
    )
    hist = np.zeros((bins, bins))
    np.add.at(hist, (ti, pi_), weight)
    return AEHistogram(hist / hist.sum())


def chi_square(h, g):
    """Symmetric chi-square distance between two normalized histograms.

    Sums (h_i - g_i)^2 / (h_i + g_i) over bins, skipping bins where
    both are zero. Bounded by [0, 2] for normalized inputs.
    """
    if h.shape != g.shape:
        raise ShapeMismatch(f"histogram shapes differ: {h.shape} vs {g.shape}")
    a = h.bins.ravel()
    b = g.bins.ravel()
    denom = a + b
    use = denom > 0
    num = (a[use] - b[use]) ** 2
    return float((num / denom[use]).sum())


class PartDescriptor:
    """Retrieval descriptor of one facial part: grid plus histogram."""

    __slots__ = ("part", "grid", "histogram")

    def __init__(self, part, grid, histogram):
        self.part = part
        self.grid = grid
        self.histogram = histogram


class PartDistance:
    """Combined distance between two descriptors of the same part."""

    __slots__ = ("d_pts", "d_normals", "alpha", "combined")

    def __init__(self, d_pts, d_normals, alpha):
        if d_pts < 0 or d_normals < 0 or alpha < 0:
            raise ValueError("distance components must be non-negative")
        self.d_pts = float(d_pts)
        self.d_normals = float(d_normals)
        self.alpha = float(alpha)
        self.combined = self.d_pts + self.alpha * self.d_normals

    def __repr__(self):
        return (
            f"PartDistance(d_pts={self.d_pts:.6g}, d_normals={self.d_normals:.6g}, "
            f"alpha={self.alpha:g}, combined={self.combined:.6g})"
        )


def combined_distance(a_desc, b_desc, alpha):
    """Grid distance plus alpha times histogram distance."""
    d_pts = pts_distance(a_desc.grid, b_desc.grid)
    d_normals = chi_square(a_desc.histogram, b_desc.histogram)
    return PartDistance(d_pts, d_normals, alpha)


def part_descriptor(mesh, mask, sellion, chin, m=DEFAULT_M, n=DEFAULT_N,
                    bins=DEFAULT_BINS):
    """Descriptor of one part: grid on the part submesh, histogram on
    the masked vertices of the full mesh."""
    sub, _ = mesh.submesh(mask.vertices)
    grid = sample_pseudo_landmarks(sub, sellion, chin, m, n)
    hist = ae_histogram(mesh, mask, bins=bins)
    return PartDescriptor(mask.name, grid, hist)


_CACHE_MAGIC = b"DFDESC01"


def save_descriptors(path, records, m, n, bins):
    """Write a descriptor cache: one record per (entry id, part).

    ``records`` maps (id, part) to PartDescriptor. Records are sorted
    by key so identical inputs produce identical bytes.
    """
    chunks = [_CACHE_MAGIC, struct.pack("<4I", m, n, bins, len(records))]
    for (entry_id, part), desc in sorted(records.items()):
        if (desc.grid.m, desc.grid.n) != (m, n):
            raise ShapeMismatch(
                f"descriptor {entry_id}/{part} has grid ({desc.grid.m}, "
                f"{desc.grid.n}), cache expects ({m}, {n})"
            )
        if desc.histogram.shape != (bins, bins):
            raise ShapeMismatch(
                f"descriptor {entry_id}/{part} histogram shape "
                f"{desc.histogram.shape}, cache expects ({bins}, {bins})"
            )
        id_b = entry_id.encode("utf-8")
        part_b = part.encode("utf-8")
        chunks.append(struct.pack("<HH", len(id_b), len(part_b)))
        chunks.append(id_b)
        chunks.append(part_b)
        empty = desc.grid.empty_rows
        chunks.append(struct.pack("<H", len(empty)))
        chunks.append(struct.pack(f"<{len(empty)}H", *empty))
        chunks.append(np.ascontiguousarray(desc.grid.points, dtype="<f8").tobytes())
        chunks.append(
            np.ascontiguousarray(desc.histogram.bins, dtype="<f8").tobytes()
        )
    Path(path).write_bytes(b"".join(chunks))


def load_descriptors(path):
    """Read a descriptor cache; returns (records, m, n, bins)."""
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such descriptor cache: {path}")
    blob = path.read_bytes()
    if not blob.startswith(_CACHE_MAGIC):
        raise UnreadableFile(f"{path}: not a descriptor cache")
    offset = len(_CACHE_MAGIC)
    try:
        m, n, bins, count = struct.unpack_from("<4I", blob, offset)
        offset += 16
        grid_bytes = (m + 2) * n * 3 * 8
        hist_bytes = bins * bins * 8
        records = {}
        for _ in range(count):
            id_len, part_len = struct.unpack_from("<HH", blob, offset)
            offset += 4
            entry_id = blob[offset:offset + id_len].decode("utf-8")
            offset += id_len
            part = blob[offset:offset + part_len].decode("utf-8")
            offset += part_len
            (n_empty,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            empty = struct.unpack_from(f"<{n_empty}H", blob, offset)
            offset += 2 * n_empty
            pts = np.frombuffer(blob, dtype="<f8", count=(m + 2) * n * 3,
                                offset=offset).reshape(-1, 3)
            offset += grid_bytes
            hist = np.frombuffer(blob, dtype="<f8", count=bins * bins,
                                 offset=offset).reshape(bins, bins)
            offset += hist_bytes
            records[(entry_id, part)] = PartDescriptor(
                part,
                PseudoLandmarkGrid(m, n, pts.copy(), empty),
                AEHistogram(hist.copy()),
            )
    except (struct.error, ValueError) as exc:
        raise UnreadableFile(f"{path}: truncated descriptor cache: {exc}") from exc
    if offset != len(blob):
        raise UnreadableFile(f"{path}: trailing bytes in descriptor cache")
    return records, m, n, bins
