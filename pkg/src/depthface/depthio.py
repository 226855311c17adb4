"""Depth frame and landmark ingestion, and back-projection to a face mesh.

A depth frame is a row-major grid of metric depths in millimeters with
pinhole intrinsics. Zero marks an invalid sample (sensor hole). Frames
are stored on disk as 16-bit little-endian P5 PGM in tenths of a
millimeter, with a JSON intrinsics sidecar sharing the basename.

Landmark files are JSON arrays of named points, either 2D pixel entries
{"name", "u", "v", "group"} or 3D millimeter entries
{"name", "x", "y", "z", "group"}, with group one of "silhouette" or
"internal".
"""

import json
import logging
import re
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometry,
    DimensionMismatch,
    DuplicateName,
    EmptyRegion,
    MissingAnchor,
    MissingIntrinsics,
    TooFewValid,
    UnreadableFile,
    WrongCount,
)
from .geometry import TriangleMesh, clean_triangles, compute_vertex_normals

logger = logging.getLogger(__name__)

# Depth samples outside this open interval (mm) are sensor garbage and
# are zeroed at ingestion.
DEPTH_RANGE_MM = (100.0, 5000.0)

# Triangles spanning a longer 3D edge than this cross a depth
# discontinuity (occlusion boundary), not surface.
DISCONTINUITY_MM = 10.0

ANCHOR_NAMES = ("sellion", "chin_tip")
GROUPS = ("silhouette", "internal")

FULL_LANDMARK_COUNT = 83
SILHOUETTE_COUNT = 19


class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    __slots__ = ("fx", "fy", "cx", "cy")

    def __init__(self, fx, fy, cx, cy):
        for name, v in (("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)):
            if not np.isfinite(v):
                raise ValueError(f"intrinsic {name} must be finite, got {v!r}")
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    def __repr__(self):
        return f"Intrinsics(fx={self.fx}, fy={self.fy}, cx={self.cx}, cy={self.cy})"


class DepthFrame:
    """A single depth observation: (height, width) metric depths plus intrinsics.

    ``depth`` is held as a row-major float64 array in millimeters; zero
    entries are invalid samples.
    """

    __slots__ = ("depth", "intrinsics")

    def __init__(self, depth, intrinsics):
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        if depth.ndim != 2:
            raise DimensionMismatch(f"depth must be 2D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)):
            raise DimensionMismatch("depth contains non-finite samples")
        if np.any(depth < 0):
            raise DimensionMismatch("depth contains negative samples")
        depth.flags.writeable = False
        self.depth = depth
        if not isinstance(intrinsics, Intrinsics):
            intrinsics = Intrinsics(**intrinsics)
        self.intrinsics = intrinsics

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid_mask(self):
        return self.depth > 0

    @property
    def num_valid(self):
        return int(np.count_nonzero(self.depth))

    def backproject_pixels(self, us, vs):
        """Lift pixel coordinates (us, vs) with their stored depths to 3D mm.

        Callers must pass integer pixel coordinates of valid samples.
        """
        us = np.asarray(us)
        vs = np.asarray(vs)
        d = self.depth[vs, us]
        k = self.intrinsics
        return np.column_stack(
            [(us - k.cx) * d / k.fx, (vs - k.cy) * d / k.fy, d]
        )

    def project_points(self, points):
        """Pinhole projection of 3D camera-frame points to (u, v) pixels."""
        points = np.asarray(points, dtype=np.float64)
        k = self.intrinsics
        z = points[:, 2]
        return np.column_stack(
            [points[:, 0] * k.fx / z + k.cx, points[:, 1] * k.fy / z + k.cy]
        )


class LandmarkSet:
    """Named fiducial points in pixel (2D) or millimeter (3D) coordinates.

    The full tier has exactly 83 entries, 19 of them on the silhouette,
    and must include the "sellion" and "chin_tip" anchors. A reduced
    15-name anatomical tier is used for database registration. ``valid``
    flags mark entries that could not be lifted to 3D; invalid entries
    are excluded from every downstream computation.
    """

    def __init__(self, names, points, groups, valid=None):
        self.names = list(names)
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] not in (2, 3):
            raise ValueError(f"landmark points must be (n,2) or (n,3), got {points.shape}")
        if len(self.names) != len(points):
            raise ValueError("names and points length mismatch")
        if not np.all(np.isfinite(points)):
            raise ValueError("landmark coordinates must be finite")
        self.points = points
        self.groups = list(groups)
        if len(self.groups) != len(self.names):
            raise ValueError("names and groups length mismatch")
        for g in self.groups:
            if g not in GROUPS:
                raise ValueError(f"unknown landmark group {g!r}")
        seen = set()
        for n in self.names:
            if n in seen:
                raise DuplicateName(f"duplicate landmark name {n!r}")
            seen.add(n)
        if valid is None:
            valid = np.ones(len(self.names), dtype=bool)
        self.valid = np.asarray(valid, dtype=bool).reshape(len(self.names))
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    @property
    def is_3d(self):
        return self.points.shape[1] == 3

    def has(self, name):
        return name in self._index and self.valid[self._index[name]]

    def get(self, name):
        """Position of a named landmark; KeyError when missing or invalid."""
        i = self._index[name]
        if not self.valid[i]:
            raise KeyError(f"landmark {name!r} is flagged absent")
        return self.points[i]

    def internal_mask(self):
        return np.array([g == "internal" for g in self.groups])

    def silhouette_mask(self):
        return np.array([g == "silhouette" for g in self.groups])

    def common_valid(self, other):
        """Names valid in both sets, in this set's order."""
        return [
            n for n, ok in zip(self.names, self.valid)
            if ok and other.has(n)
        ]

    def positions(self, names):
        return np.array([self.get(n) for n in names], dtype=np.float64)

    def with_points(self, points, valid=None):
        return LandmarkSet(
            self.names, points, self.groups,
            self.valid if valid is None else valid,
        )

    def check_full_schema(self):
        """Enforce the 83-entry tier: counts, groups, and anchors."""
        if len(self) != FULL_LANDMARK_COUNT:
            raise WrongCount(
                f"expected {FULL_LANDMARK_COUNT} landmarks, got {len(self)}"
            )
        n_sil = int(self.silhouette_mask().sum())
        if n_sil != SILHOUETTE_COUNT:
            raise WrongCount(
                f"expected {SILHOUETTE_COUNT} silhouette landmarks, got {n_sil}"
            )
        for anchor in ANCHOR_NAMES:
            if anchor not in self._index:
                raise MissingAnchor(f"landmark set lacks {anchor!r}")
        return self

    def to_records(self):
        recs = []
        for i, name in enumerate(self.names):
            rec = {"name": name}
            if self.is_3d:
                rec.update(x=self.points[i, 0], y=self.points[i, 1], z=self.points[i, 2])
            else:
                rec.update(u=self.points[i, 0], v=self.points[i, 1])
            rec["group"] = self.groups[i]
            recs.append(rec)
        return recs


def load_depth(path):
    """Load a depth frame from a 16-bit PGM plus its intrinsics sidecar.

    Samples outside the (100, 5000) mm working range are zeroed.

    Raises
    ------
    UnreadableFile
        Missing file or malformed PGM header.
    MissingIntrinsics
        No sidecar JSON, or sidecar lacking fx/fy/cx/cy.
    DimensionMismatch
        Payload length disagrees with the declared width and height.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such depth file: {path}")
    blob = path.read_bytes()
    header = _parse_pgm_header(blob, path)
    width, height, maxval, offset = header
    if maxval != 65535:
        raise UnreadableFile(f"{path}: expected 16-bit PGM (maxval 65535), got {maxval}")
    expected = width * height * 2
    payload = blob[offset:]
    if len(payload) != expected:
        raise DimensionMismatch(
            f"{path}: payload is {len(payload)} bytes, "
            f"expected {expected} for {width}x{height}"
        )
    tenths = np.frombuffer(payload, dtype="<u2").reshape(height, width)
    depth = tenths.astype(np.float64) / 10.0
    lo, hi = DEPTH_RANGE_MM
    out_of_range = (depth > 0) & ((depth <= lo) | (depth >= hi))
    if np.any(out_of_range):
        depth = depth.copy()
        depth[out_of_range] = 0.0
        logger.info("%s: zeroed %d out-of-range samples", path, out_of_range.sum())
    intrinsics = _load_intrinsics_sidecar(path)
    return DepthFrame(depth, intrinsics)


def save_depth(frame, path):
    """Write a depth frame as 16-bit PGM (tenths of mm) plus sidecar."""
    path = Path(path)
    tenths = np.round(frame.depth * 10.0)
    if np.any(tenths > 65535):
        raise ValueError("depth exceeds the 6553.5 mm PGM range")
    data = tenths.astype("<u2").tobytes()
    header = f"P5\n{frame.width} {frame.height}\n65535\n".encode("ascii")
    path.write_bytes(header + data)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps(frame.intrinsics.as_dict(), indent=2, sort_keys=True) + "\n"
    )


def _parse_pgm_header(blob, path):
    """Parse a P5 header; returns (width, height, maxval, payload offset)."""
    if not blob.startswith(b"P5"):
        raise UnreadableFile(f"{path}: not a P5 PGM file")
    # tokens are separated by whitespace; '#' starts a comment to end of line
    tokens = []
    i = 2
    while len(tokens) < 3:
        if i >= len(blob):
            raise UnreadableFile(f"{path}: truncated PGM header")
        c = blob[i:i + 1]
        if c == b"#":
            nl = blob.find(b"\n", i)
            if nl < 0:
                raise UnreadableFile(f"{path}: truncated PGM header")
            i = nl + 1
        elif c.isspace():
            i += 1
        else:
            m = re.match(rb"\d+", blob[i:])
            if not m:
                raise UnreadableFile(f"{path}: bad PGM header token")
            tokens.append(int(m.group()))
            i += m.end()
    # exactly one whitespace byte separates maxval from the payload
    if i >= len(blob) or not blob[i:i + 1].isspace():
        raise UnreadableFile(f"{path}: missing separator after PGM maxval")
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise UnreadableFile(f"{path}: bad PGM dimensions {width}x{height}")
    return width, height, maxval, i + 1


def _load_intrinsics_sidecar(path):
    sidecar = path.with_suffix(".json")
    if not sidecar.is_file():
        raise MissingIntrinsics(f"no intrinsics sidecar {sidecar}")
    try:
        raw = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MissingIntrinsics(f"cannot parse intrinsics {sidecar}: {exc}") from exc
    try:
        return Intrinsics(raw["fx"], raw["fy"], raw["cx"], raw["cy"])
    except (KeyError, TypeError) as exc:
        raise MissingIntrinsics(f"{sidecar}: intrinsics need fx, fy, cx, cy") from exc


def load_landmarks(path, tier="full"):
    """Load a landmark JSON file.

    tier "full" enforces the 83-entry schema; tier "anchor" enforces the
    15-name anatomical registration set; tier None skips count checks.

    Raises
    ------
    UnreadableFile, WrongCount, MissingAnchor, DuplicateName
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such landmark file: {path}")
    try:
        records = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot parse landmarks {path}: {exc}") from exc
    if not isinstance(records, list):
        raise UnreadableFile(f"{path}: landmark file must be a JSON array")
    lm = landmarks_from_records(records)
    if tier == "full":
        lm.check_full_schema()
    elif tier == "anchor":
        from .dataset import ANCHOR15_NAMES

        if len(lm) != len(ANCHOR15_NAMES):
            raise WrongCount(
                f"{path}: expected {len(ANCHOR15_NAMES)} anatomical landmarks, "
                f"got {len(lm)}"
            )
        missing = sorted(set(ANCHOR15_NAMES) - set(lm.names))
        if missing:
            raise MissingAnchor(f"{path}: missing anatomical landmarks {missing}")
    elif tier is not None:
        raise ValueError(f"unknown landmark tier {tier!r}")
    return lm


def landmarks_from_records(records):
    names, pts, groups = [], [], []
    dim = None
    for rec in records:
        names.append(rec["name"])
        groups.append(rec.get("group", "internal"))
        if "u" in rec:
            coord = (float(rec["u"]), float(rec["v"]))
        else:
            coord = (float(rec["x"]), float(rec["y"]), float(rec["z"]))
        if dim is None:
            dim = len(coord)
        elif dim != len(coord):
            raise UnreadableFile("landmark file mixes 2D and 3D entries")
        pts.append(coord)
    return LandmarkSet(names, np.asarray(pts, dtype=np.float64), groups)


def save_landmarks(landmarks, path):
    Path(path).write_text(
        json.dumps(landmarks.to_records(), indent=2, sort_keys=True) + "\n"
    )


def derive_face_rect(landmarks, frame, inflate=0.15):
    """Pixel rectangle (u0, v0, u1, v1), half-open, around 2D landmarks.

    The landmark bounding box is inflated by the given fraction per side
    and clamped to the frame.
    """
    if landmarks.is_3d:
        raise ValueError("face rect needs 2D pixel landmarks")
    pts = landmarks.points[landmarks.valid]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = (hi - lo) * inflate
    u0 = int(np.floor(lo[0] - pad[0]))
    v0 = int(np.floor(lo[1] - pad[1]))
    u1 = int(np.ceil(hi[0] + pad[0])) + 1
    v1 = int(np.ceil(hi[1] + pad[1])) + 1
    return (
        max(u0, 0), max(v0, 0),
        min(u1, frame.width), min(v1, frame.height),
    )


def backproject(frame, face_rect, max_edge_mm=DISCONTINUITY_MM):
    """Back-project the valid depth pixels inside a rectangle to a mesh.

    Each valid pixel (u, v, d) becomes the vertex
    ((u - cx) d / fx, (v - cy) d / fy, d). Grid-adjacent valid pixels
    are triangulated with windings that face the sensor; triangles whose
    longest 3D edge exceeds ``max_edge_mm`` straddle a depth
    discontinuity and are dropped. Vertex normals are computed on the
    result.

    Returns
    -------
    mesh : TriangleMesh
    vertex_map : (height, width) int array
        Full-frame map from pixel to vertex index, -1 where no vertex.

    Raises
    ------
    EmptyRegion
        Rectangle out of frame bounds or fewer than 3 valid pixels.
    DegenerateGeometry
        No triangle survives the discontinuity filter.
    """
    u0, v0, u1, v1 = (int(x) for x in face_rect)
    if not (0 <= u0 < u1 <= frame.width and 0 <= v0 < v1 <= frame.height):
        raise EmptyRegion(
            f"face rect {face_rect} is not inside a {frame.width}x{frame.height} frame"
        )
    window = frame.depth[v0:v1, u0:u1]
    valid = window > 0
    n_valid = int(valid.sum())
    if n_valid < 3:
        raise EmptyRegion(f"only {n_valid} valid depth pixels in face rect")

    vertex_map = np.full((frame.height, frame.width), -1, dtype=np.int64)
    vs_local, us_local = np.nonzero(valid)
    vertex_map[vs_local + v0, us_local + u0] = np.arange(n_valid)
    vertices = frame.backproject_pixels(us_local + u0, vs_local + v0)

    # Cell corners: tl=(r,c), tr=(r,c+1), bl=(r+1,c), br=(r+1,c+1).
    # Windings below make triangle normals point toward the sensor
    # (negative z in the camera frame).
    idx = np.full((v1 - v0, u1 - u0), -1, dtype=np.int64)
    idx[valid] = np.arange(n_valid)
    tl = idx[:-1, :-1]
    tr = idx[:-1, 1:]
    bl = idx[1:, :-1]
    br = idx[1:, 1:]
    have = np.stack([tl >= 0, tr >= 0, bl >= 0, br >= 0])
    count = have.sum(axis=0)
    tris = []
    full = count == 4
    if full.any():
        tris.append(np.column_stack([tl[full], bl[full], tr[full]]))
        tris.append(np.column_stack([tr[full], bl[full], br[full]]))
    three = count == 3
    if three.any():
        for missing, corner_triple in (
            (0, (tr, bl, br)),
            (1, (tl, bl, br)),
            (2, (tl, br, tr)),
            (3, (tl, bl, tr)),
        ):
            sel = three & ~have[missing]
            if sel.any():
                tris.append(np.column_stack([c[sel] for c in corner_triple]))
    triangles = (
        np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    )
    triangles, _ = clean_triangles(vertices, triangles)

    if len(triangles):
        corners = vertices[triangles]
        edge_len = np.linalg.norm(
            corners - np.roll(corners, -1, axis=1), axis=2
        )
        triangles = triangles[edge_len.max(axis=1) <= max_edge_mm]
    if len(triangles) == 0:
        raise DegenerateGeometry("no triangle survives the discontinuity filter")
    mesh = compute_vertex_normals(TriangleMesh(vertices, triangles))
    return mesh, vertex_map


def lift_landmarks(frame, landmarks, radius=3):
    """Lift 2D pixel landmarks to 3D using nearby valid depth.

    Each landmark takes the back-projection of the valid pixel nearest
    to it within ``radius`` pixels (Euclidean). Landmarks with no valid
    depth in that disk are flagged absent.

    Raises
    ------
    TooFewValid
        Fewer than 6 internal landmarks could be lifted.
    """
    if landmarks.is_3d:
        raise ValueError("lift_landmarks expects 2D pixel landmarks")
    lifted = np.zeros((len(landmarks), 3))
    ok = np.zeros(len(landmarks), dtype=bool)
    for i, (u, v) in enumerate(landmarks.points):
        if not landmarks.valid[i]:
            continue
        pick = _nearest_valid_pixel(frame, u, v, radius)
        if pick is None:
            continue
        pu, pv = pick
        lifted[i] = frame.backproject_pixels([pu], [pv])[0]
        ok[i] = True
    n_internal = int(np.count_nonzero(ok & landmarks.internal_mask()))
    if n_internal < 6:
        raise TooFewValid(
            f"only {n_internal} internal landmarks have depth; "
            "rigid alignment is underdetermined"
        )
    dropped = [n for n, o in zip(landmarks.names, ok) if not o]
    if dropped:
        logger.info("landmarks without depth support: %s", ", ".join(dropped))
    return LandmarkSet(landmarks.names, lifted, landmarks.groups, ok)


def _nearest_valid_pixel(frame, u, v, radius):
    """Valid integer pixel minimizing Euclidean distance to (u, v)."""
    u_lo = max(int(np.ceil(u - radius)), 0)
    u_hi = min(int(np.floor(u + radius)), frame.width - 1)
    v_lo = max(int(np.ceil(v - radius)), 0)
    v_hi = min(int(np.floor(v + radius)), frame.height - 1)
    if u_lo > u_hi or v_lo > v_hi:
        return None
    us, vs = np.meshgrid(
        np.arange(u_lo, u_hi + 1), np.arange(v_lo, v_hi + 1), indexing="xy"
    )
    d2 = (us - u) ** 2 + (vs - v) ** 2
    usable = (d2 <= radius * radius) & (frame.depth[vs, us] > 0)
    if not usable.any():
        return None
    d2 = np.where(usable, d2, np.inf)
    # ties break toward smaller v, then smaller u
    flat = np.argmin(d2)
    pv, pu = np.unravel_index(flat, d2.shape)
    return int(us[pv, pu]), int(vs[pv, pu])
