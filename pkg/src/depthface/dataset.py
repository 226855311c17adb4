"""Synthetic face database: generation, registration, generic mean.

Heads are built on one fixed spherical parametrization (front toward
+z, up toward +y, sampling densified over the face) displaced radially
by anatomical feature bumps whose amplitudes and extents come from a
12-entry shape parameter vector, plus smooth seeded detail bumps. All
heads share the topology, so landmark tables are fixed vertex ids and
ground-truth dense correspondence is the identity.
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import cdist

from .align import NonrigidRegistration, ThinPlateSplineWarp
from .depthio import LandmarkSet, load_landmarks
from .errors import (
    MissingAnchor,
    NoConvergence,
    TopologyMismatch,
    UnreadableFile,
    WrongCount,
)
from .geometry import TriangleMesh, compute_vertex_normals, load_mesh
from .features import PART_NAMES, PartMask

logger = logging.getLogger(__name__)

ANCHOR15_NAMES = (
    "sellion",
    "chin_tip",
    "nose_tip",
    "exocanthion_l",
    "exocanthion_r",
    "endocanthion_l",
    "endocanthion_r",
    "alare_l",
    "alare_r",
    "cheilion_l",
    "cheilion_r",
    "zygion_l",
    "zygion_r",
    "tragion_l",
    "tragion_r",
)

PARAM_NAMES = (
    "nose_length",
    "nose_width",
    "nose_protrusion",
    "eye_depth",
    "mouth_width",
    "lip_thickness",
    "chin_protrusion",
    "cheek_fullness",
    "jaw_taper",
    "brow_ridge",
    "face_width",
    "face_length",
)

SILHOUETTE_COUNT = 19
INTERNAL_FILL_COUNT = 83 - SILHOUETTE_COUNT - len(ANCHOR15_NAMES)

# base grid resolution: longitude count and interior latitude rings
_NU, _NV = 56, 46

# feather weights ramp over this geodesic band at part boundaries (mm)
FEATHER_BAND_MM = 5.0

_ANCHOR_DIRS = {
    "sellion": (0.0, 0.22, 1.0),
    "chin_tip": (0.0, -0.62, 0.85),
    "nose_tip": (0.0, -0.02, 1.0),
    "exocanthion_l": (-0.42, 0.20, 0.95),
    "exocanthion_r": (0.42, 0.20, 0.95),
    "endocanthion_l": (-0.16, 0.20, 1.0),
    "endocanthion_r": (0.16, 0.20, 1.0),
    "alare_l": (-0.13, -0.08, 1.0),
    "alare_r": (0.13, -0.08, 1.0),
    "cheilion_l": (-0.22, -0.32, 0.95),
    "cheilion_r": (0.22, -0.32, 0.95),
    "zygion_l": (-0.72, 0.08, 0.62),
    "zygion_r": (0.72, 0.08, 0.62),
    "tragion_l": (-0.95, 0.10, 0.12),
    "tragion_r": (0.95, 0.10, 0.12),
}


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _base_directions():
    """Unit directions of the shared head grid, poles first and last."""
    j = np.arange(_NU)
    c = 2.0 * (j + 0.5) / _NU - 1.0
    # densify longitudes toward the face meridian (u = 0 at +z)
    u = np.pi * np.sign(c) * np.abs(c) ** 1.35
    s = np.arange(1, _NV + 1) / (_NV + 1)
    v = np.pi * s + 0.22 * np.sin(2.0 * np.pi * s)
    uu, vv = np.meshgrid(u, v)
    ring_dirs = np.stack(
        [np.sin(vv) * np.sin(uu), np.cos(vv), np.sin(vv) * np.cos(uu)], axis=-1
    ).reshape(-1, 3)
    return np.concatenate(
        [[[0.0, 1.0, 0.0]], ring_dirs, [[0.0, -1.0, 0.0]]]
    )


def _base_triangles():
    tris = []
    ring = lambda i, j: 1 + i * _NU + (j % _NU)
    for j in range(_NU):
        tris.append([0, ring(0, j), ring(0, j + 1)])
    for i in range(_NV - 1):
        for j in range(_NU):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append([a, c, b])
            tris.append([b, c, d])
    bottom = 1 + _NV * _NU
    for j in range(_NU):
        tris.append([bottom, ring(_NV - 1, j + 1), ring(_NV - 1, j)])
    return np.array(tris)


_DIRS = _base_directions()
_TRIS = _base_triangles()


def _nearest_vertex(direction, taken=()):
    scores = _DIRS @ _unit(direction)
    for idx in np.argsort(-scores):
        if int(idx) not in taken:
            return int(idx)
    raise RuntimeError("ran out of grid vertices")


def _landmark_vertex_table():
    """Fixed vertex ids for the 83-name schema on the shared grid."""
    taken = set()
    table = {}
    for name in ANCHOR15_NAMES:
        table[name] = _nearest_vertex(_ANCHOR_DIRS[name], taken)
        taken.add(table[name])
    rho = np.deg2rad(72.0)
    for k, phi in enumerate(np.linspace(-115.0, 115.0, SILHOUETTE_COUNT)):
        phi_r = np.deg2rad(phi)
        d = (
            np.cos(rho) * np.array([0.0, 0.0, 1.0])
            + np.sin(rho)
            * (np.cos(phi_r) * np.array([0.0, 1.0, 0.0])
               + np.sin(phi_r) * np.array([1.0, 0.0, 0.0]))
        )
        name = f"silhouette_{k:02d}"
        table[name] = _nearest_vertex(d, taken)
        taken.add(table[name])
    # quasi-uniform fill of the inner face disc (golden-angle spiral)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    placed = 0
    k = 0
    while placed < INTERNAL_FILL_COUNT:
        t = (k + 0.5) / 90.0
        k += 1
        if t > 1.0:
            raise RuntimeError("spiral exhausted before filling landmarks")
        cap = np.deg2rad(50.0) * np.sqrt(t)
        ang = golden * k
        d = np.array(
            [np.sin(cap) * np.cos(ang), np.sin(cap) * np.sin(ang), np.cos(cap)]
        )
        idx = _nearest_vertex(d, taken)
        table[f"internal_{placed:02d}"] = idx
        taken.add(idx)
        placed += 1
    return table


_LM_VERTEX = _landmark_vertex_table()

FULL83_NAMES = (
    tuple(f"silhouette_{k:02d}" for k in range(SILHOUETTE_COUNT))
    + ANCHOR15_NAMES
    + tuple(f"internal_{k:02d}" for k in range(INTERNAL_FILL_COUNT))
)

FULL83_GROUPS = tuple(
    "silhouette" if name.startswith("silhouette_") else "internal"
    for name in FULL83_NAMES
)


def _tangent_basis(center):
    c = _unit(center)
    x_t = _unit(np.array([1.0, 0.0, 0.0]) - c * c[0])
    y_t = np.cross(c, x_t)
    return c, x_t, y_t


def _bump(dirs, center, sigma_u, sigma_v, sigma_v_up=None):
    """Anisotropic Gaussian profile over the sphere around a center.

    ``sigma_v_up`` makes the vertical profile one-sided: extent above
    the center stays fixed while ``sigma_v`` stretches it below, so a
    feature can lengthen downward without disturbing what sits above.
    """
    c, x_t, y_t = _tangent_basis(center)
    offset = dirs - np.outer(dirs @ c, c)
    h = offset @ x_t
    w = offset @ y_t
    if sigma_v_up is None:
        sv = sigma_v
    else:
        sv = np.where(w > 0, sigma_v_up, sigma_v)
    return np.exp(-(h**2) / (2 * sigma_u**2) - (w**2) / (2 * sv**2))


def _head_vertices(params, detail_rng=None):
    """Vertex positions for one head given named shape parameters."""
    p = {name: float(params[name]) for name in PARAM_NAMES}
    dirs = _DIRS
    ax, ay, az = 70.0, 90.0, 78.0
    radius = 1.0 / np.sqrt(
        (dirs[:, 0] / ax) ** 2 + (dirs[:, 1] / ay) ** 2 + (dirs[:, 2] / az) ** 2
    )

    bump = np.zeros(len(dirs))
    bump += (10.0 + 2.0 * p["nose_protrusion"]) * _bump(
        dirs, (0.0, -0.02, 1.0),
        0.13 * (1.0 + 0.22 * p["nose_width"]),
        0.20 * (1.0 + 0.25 * p["nose_length"]),
        sigma_v_up=0.14,
    )
    for side in (-1.0, 1.0):
        bump += (2.5 + 0.9 * p["brow_ridge"]) * _bump(
            dirs, (side * 0.25, 0.28, 1.0), 0.15, 0.10
        )
        bump -= (3.5 + 1.0 * p["eye_depth"]) * _bump(
            dirs, (side * 0.30, 0.18, 1.0), 0.11, 0.11
        )
        bump += 2.0 * p["cheek_fullness"] * _bump(
            dirs, (side * 0.50, -0.12, 0.90), 0.22, 0.22
        )
    bump += (2.2 + 0.8 * p["lip_thickness"]) * _bump(
        dirs, (0.0, -0.34, 1.0),
        0.20 * (1.0 + 0.20 * p["mouth_width"]), 0.07,
    )
    bump += (5.0 + 1.5 * p["chin_protrusion"]) * _bump(
        dirs, (0.0, -0.58, 0.95), 0.16, 0.16
    )

    if detail_rng is not None:
        for _ in range(24):
            center = _unit(detail_rng.normal(size=3))
            sigma = detail_rng.uniform(0.15, 0.40)
            amp = detail_rng.normal(scale=0.45)
            bump += amp * _bump(dirs, center, sigma, sigma)

    positions = dirs * (radius + bump)[:, None]
    # frontal weight: identity variation dies off toward scalp and nape,
    # keeping it inside the region the anatomical landmarks cover
    frontal = np.exp(-((np.arccos(np.clip(dirs[:, 2], -1.0, 1.0)) / 0.9) ** 2))
    # taper the lower face toward the chin
    taper = (0.10 + 0.04 * p["jaw_taper"]) * frontal
    y_norm = positions[:, 1] / ay
    shrink = 1.0 - taper / (1.0 + np.exp((y_norm + 0.25) / 0.12))
    positions[:, 0] *= shrink
    # facial proportions
    positions[:, 0] *= 1.0 + 0.06 * p["face_width"] * frontal
    positions[:, 1] *= 1.0 + 0.06 * p["face_length"] * frontal
    return positions


def _landmark_sets(mesh):
    ids = np.array([_LM_VERTEX[name] for name in FULL83_NAMES])
    full = LandmarkSet(FULL83_NAMES, mesh.vertices[ids], FULL83_GROUPS)
    anchor_ids = np.array([_LM_VERTEX[name] for name in ANCHOR15_NAMES])
    anchors = LandmarkSet(
        ANCHOR15_NAMES,
        mesh.vertices[anchor_ids],
        ("internal",) * len(ANCHOR15_NAMES),
    )
    return full, anchors


def synthesize_head(params, detail_rng=None):
    """One head from named shape parameters (each roughly in [-1, 1]).

    Returns (mesh with normals, 83-landmark set, 15-landmark set); the
    landmark positions are mesh vertices, so they lie on the surface
    exactly.
    """
    mesh = compute_vertex_normals(
        TriangleMesh(_head_vertices(params, detail_rng), _TRIS)
    )
    full, anchors = _landmark_sets(mesh)
    return mesh, full, anchors


def base_head():
    """The neutral head: all shape parameters zero, no detail bumps."""
    return synthesize_head({name: 0.0 for name in PARAM_NAMES})


def generate_synthetic(seed, count):
    """Deterministic list of (mesh, 83-landmark set, 15-landmark set).

    Entry i draws its parameters and detail bumps from a generator
    seeded with (seed, i), so output is bit-identical across runs and
    stable under changes of count.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        params = dict(zip(PARAM_NAMES, rng.uniform(-1.0, 1.0, len(PARAM_NAMES))))
        out.append(synthesize_head(params, detail_rng=rng))
    return out


def synthetic_metadata(seed, count):
    """Age/sex tags matching generate_synthetic's entries."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), i, 1])
        out.append(
            {"age": int(rng.integers(18, 81)), "sex": str(rng.choice(["f", "m"]))}
        )
    return out


def landmark_vertex_ids(names=FULL83_NAMES):
    """Fixed grid vertex ids for the given landmark names."""
    return np.array([_LM_VERTEX[name] for name in names])


_BOOTSTRAP_CONTROLS = 96
_INIT_TAPER_MM = 60.0


class _AnchoredWarp:
    """Landmark spline that fades to the identity away from landmarks.

    A spline fit to a frontal landmark cluster extrapolates unreliable
    displacements over the rest of the head, and the tangential part of
    that error is invisible to closest-point refinement. Attenuating
    the whole displacement by exp(-(d / taper)^2), with d the distance
    to the nearest control, leaves uncovered regions unmoved instead;
    the refinement then places them by its data and smoothness terms.
    At the controls themselves d = 0 and the warp still interpolates
    exactly.
    """

    def __init__(self, taper):
        self.taper = float(taper)

    def fit(self, src, dst):
        self._tps = ThinPlateSplineWarp().fit(src, dst)
        return self

    def transform(self, points):
        points = np.asarray(points, dtype=np.float64)
        warped = self._tps.transform(points)
        d = cdist(points, self._tps.control_points_).min(axis=1)
        fade = np.exp(-((d / self.taper) ** 2))
        return points + fade[:, None] * (warped - points)


def _spread_vertices(positions, count, first=0):
    """Greedy farthest-point sample of vertex ids."""
    chosen = [first]
    d = np.linalg.norm(positions - positions[first], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(positions - positions[nxt], axis=1))
    return np.array(chosen)


def register_database(entries, template, template_anchors=None, **reg_params):
    """Re-express raw meshes on the template topology.

    ``entries`` is a list of (id, mesh, 15-landmark set) triples;
    ``template_anchors`` is the template's own 15-landmark set, derived
    from the fixed vertex table when omitted (which requires the
    template to live on the shared head grid). Returns a list of
    (id, registered mesh, rms) where rms is the root mean square
    distance from matched registered vertices to the raw surface,
    in mm.

    Registration runs twice per entry: a pass seeded by the 15
    anatomical landmarks, then a pass re-seeded by control points
    spread over the whole template and pushed through the first pass's
    correspondence. The second pass removes the spline extrapolation
    error in regions the anatomical landmarks do not cover (scalp,
    lower jaw); it is skipped when too few controls found a match.

    Raises
    ------
    WrongCount, MissingAnchor
        An entry's landmark set is not the 15-name schema (the message
        names the entry).
    NoConvergence
        Registration diverged (the message names the entry).
    """
    # softer smoothness than the reconstruction default: database meshes
    # are complete closed surfaces, so the data term can be trusted more
    params = {"w_smooth": 5.0}
    params.update(reg_params)
    if template_anchors is None:
        if template.num_vertices != len(_DIRS):
            raise ValueError(
                "template is not on the shared head grid; "
                "pass its 15-landmark set explicitly"
            )
        ids = landmark_vertex_ids(ANCHOR15_NAMES)
        template_anchors = LandmarkSet(
            ANCHOR15_NAMES,
            template.vertices[ids],
            ("internal",) * len(ANCHOR15_NAMES),
        )
    src = template_anchors.positions(ANCHOR15_NAMES)
    boot = _spread_vertices(template.vertices, _BOOTSTRAP_CONTROLS)
    out = []
    for entry_id, mesh, anchors in entries:
        if len(anchors) != len(ANCHOR15_NAMES):
            raise WrongCount(
                f"entry {entry_id!r}: expected {len(ANCHOR15_NAMES)} landmarks, "
                f"got {len(anchors)}"
            )
        missing = sorted(set(ANCHOR15_NAMES) - set(anchors.names))
        if missing:
            raise MissingAnchor(
                f"entry {entry_id!r}: missing landmarks {missing}"
            )
        dst = anchors.positions(ANCHOR15_NAMES)
        try:
            init = _AnchoredWarp(taper=_INIT_TAPER_MM).fit(src, dst)
            reg = NonrigidRegistration(init_warp=init, **params).fit(
                template, mesh, src, dst
            )
            ok = reg.correspondence_.matched[boot]
            if ok.sum() >= len(ANCHOR15_NAMES):
                targets = reg.correspondence_.closest_points(mesh)
                reg = NonrigidRegistration(**params).fit(
                    template, mesh,
                    template.vertices[boot[ok]], targets[boot[ok]],
                )
        except NoConvergence as exc:
            raise NoConvergence(f"entry {entry_id!r}: {exc}") from exc
        corr = reg.correspondence_
        matched = corr.matched
        rms = float(np.sqrt((corr.distances[matched] ** 2).mean())) if matched.any() else float("inf")
        logger.info("registered %s: rms %.3f mm", entry_id, rms)
        out.append((entry_id, reg.deformed_, rms))
    return out


def generic_mean(registered):
    """Per-vertex mean of topologically identical meshes.

    Raises
    ------
    TopologyMismatch
    """
    if not registered:
        raise ValueError("need at least one registered mesh")
    first = registered[0]
    for i, mesh in enumerate(registered[1:], start=1):
        if not first.same_topology(mesh):
            raise TopologyMismatch(
                f"mesh {i} does not share the template topology"
            )
    stack = np.stack([mesh.vertices for mesh in registered])
    return compute_vertex_normals(
        TriangleMesh(stack.mean(axis=0), first.triangles)
    )


def _geodesic_to_set(mesh, inside):
    """Graph distance from each vertex to the nearest vertex outside
    ``inside`` (0 for outside vertices), along edge lengths."""
    edges = mesh.edges_unique()
    lengths = np.linalg.norm(
        mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1
    )
    n = mesh.num_vertices
    graph = coo_matrix(
        (np.concatenate([lengths, lengths]),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(n, n),
    ).tocsr()
    sources = np.flatnonzero(~inside)
    if len(sources) == 0:
        return np.full(n, np.inf)
    return dijkstra(graph, directed=False, indices=sources, min_only=True)


def default_part_masks(mesh=None):
    """Author the five standard part masks on the shared head topology.

    Regions are assigned on the fixed base directions (nose, then
    mouth, then eyes, remaining face split into cheeks at x = 0), so
    the same vertex ids apply to every head built on the grid. Feather
    weights ramp from 0 at a part's rim to 1 over a geodesic band of
    FEATHER_BAND_MM, measured on the given mesh (default: the neutral
    head).
    """
    if mesh is None:
        mesh = base_head()[0]
    if mesh.num_vertices != len(_DIRS):
        raise TopologyMismatch(
            "part masks are defined on the shared head topology"
        )
    dirs = _DIRS
    face = np.arccos(np.clip(dirs @ np.array([0.0, 0.0, 1.0]), -1, 1)) < np.deg2rad(55.0)

    nose = _bump(dirs, (0.0, -0.02, 1.0), 0.16, 0.24) > 0.55
    mouth = _bump(dirs, (0.0, -0.36, 1.0), 0.24, 0.14) > 0.55
    eyes = np.zeros(len(dirs), dtype=bool)
    for side in (-1.0, 1.0):
        eyes |= _bump(dirs, (side * 0.30, 0.20, 1.0), 0.16, 0.12) > 0.55

    assign = {}
    assign["nose"] = face & nose
    assign["mouth"] = face & mouth & ~assign["nose"]
    assign["eyes"] = face & eyes & ~assign["nose"] & ~assign["mouth"]
    rest = face & ~assign["nose"] & ~assign["mouth"] & ~assign["eyes"]
    assign["left_cheek"] = rest & (dirs[:, 0] < 0)
    assign["right_cheek"] = rest & (dirs[:, 0] >= 0)

    masks = []
    for name in PART_NAMES:
        inside = assign[name]
        depth = _geodesic_to_set(mesh, inside)
        ids = np.flatnonzero(inside)
        feather = np.clip(depth[ids] / FEATHER_BAND_MM, 0.0, 1.0)
        masks.append(PartMask(name, ids, feather))
    return masks


class DatabaseManifest:
    """Index of a registered mesh database on disk."""

    __slots__ = ("entries", "generic_path", "parameter_hash")

    def __init__(self, entries, generic_path, parameter_hash):
        for entry in entries:
            for key in ("id", "mesh_path", "landmark_path", "metadata"):
                if key not in entry:
                    raise ValueError(f"manifest entry lacks {key!r}: {entry}")
        ids = [e["id"] for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate database ids: {dupes}")
        self.entries = list(entries)
        self.generic_path = str(generic_path)
        self.parameter_hash = str(parameter_hash)

    @property
    def ids(self):
        return [e["id"] for e in self.entries]

    def to_dict(self):
        return {
            "entries": self.entries,
            "generic_path": self.generic_path,
            "parameter_hash": self.parameter_hash,
        }

    def save(self, path):
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise UnreadableFile(f"no such manifest: {path}")
        try:
            raw = json.loads(path.read_text())
            manifest = cls(
                raw["entries"], raw["generic_path"], raw["parameter_hash"]
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UnreadableFile(f"cannot parse manifest {path}: {exc}") from exc
        return manifest

    def check_files(self, root):
        """Verify every referenced file exists under the given root."""
        root = Path(root)
        missing = []
        for entry in self.entries:
            for key in ("mesh_path", "landmark_path"):
                if not (root / entry[key]).is_file():
                    missing.append(entry[key])
        if not (root / self.generic_path).is_file():
            missing.append(self.generic_path)
        if missing:
            raise UnreadableFile(f"manifest references missing files: {missing}")

    def load_entry(self, root, entry_id):
        """Load (mesh, 15-landmark set) of one entry."""
        for entry in self.entries:
            if entry["id"] == entry_id:
                root = Path(root)
                mesh = load_mesh(root / entry["mesh_path"])
                anchors = load_landmarks(root / entry["landmark_path"], tier="anchor")
                return mesh, anchors
        raise KeyError(f"no database entry {entry_id!r}")


def parameter_hash(payload):
    """Stable hash of a build-parameter mapping."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
