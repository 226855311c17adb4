"""Part merging: normal transfer from retrieved meshes and
position-normal fusion into the final surface.

The merge keeps measured geometry where it is trustworthy (vertex
positions) and imprints detail where the measurement is too coarse
(target normals borrowed from the retrieved parts). Fusion solves one
sparse least-squares problem that pulls vertices toward their
positional targets while rotating mesh edges perpendicular to the
target normals, a first-order normal agreement term.
"""

import logging

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import lsmr
from sklearn.base import BaseEstimator

from .align import dense_correspond, landmark_warp, procrustes
from .depthio import (
    ANCHOR_NAMES,
    backproject,
    derive_face_rect,
    lift_landmarks,
)
from .errors import (
    InsufficientLandmarks,
    MissingAnchor,
    MissingSource,
    ShapeMismatch,
    SingularSystem,
    SolverFailure,
)
from .features import PART_NAMES
from .geometry import (
    MeshQuery,
    compute_vertex_normals,
    interpolate_normals_batch,
)

__all__ = [
    "FusionWeights",
    "NormalField",
    "PositionNormalFuser",
    "fuse",
    "fuse_energy",
    "merge_expression",
    "merge_report",
    "transfer_normals",
]

logger = logging.getLogger(__name__)

ORIGINAL_TAG = "original"
# a target vertex farther than this from the retrieved surface keeps
# its own normal (the part did not actually cover it)
MAX_TRANSFER_DISTANCE_MM = 15.0

DEFAULT_LAMBDA_POS = 1.0
DEFAULT_LAMBDA_NORM = 20.0
# positional weight of vertices with no depth measurement behind them
UNMATCHED_POSITION_WEIGHT = 0.1


class FusionWeights:
    """Fidelity weights of the fusion objective."""

    __slots__ = ("lambda_pos", "lambda_norm")

    def __init__(self, lambda_pos=DEFAULT_LAMBDA_POS,
                 lambda_norm=DEFAULT_LAMBDA_NORM):
        lambda_pos = float(lambda_pos)
        lambda_norm = float(lambda_norm)
        if lambda_pos < 0 or lambda_norm < 0:
            raise ValueError("fusion weights must be non-negative")
        if lambda_pos == 0 and lambda_norm == 0:
            raise ValueError("fusion weights must not both be zero")
        self.lambda_pos = lambda_pos
        self.lambda_norm = lambda_norm

    def __repr__(self):
        return (
            f"FusionWeights(lambda_pos={self.lambda_pos:g}, "
            f"lambda_norm={self.lambda_norm:g})"
        )


class NormalField:
    """Per-vertex target normals with their provenance.

    ``source[i]`` is the part name whose retrieved mesh supplied the
    normal of vertex i, or "original" where the vertex kept its own
    normal (hair region, or no usable source surface nearby). All
    normals are unit length.
    """

    __slots__ = ("normals", "source")

    def __init__(self, normals, source):
        normals = np.asarray(normals, dtype=np.float64)
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ShapeMismatch(f"normals must be (n, 3), got {normals.shape}")
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise ValueError("normal field rows must be unit length")
        source = np.asarray(source, dtype="U16")
        if source.shape != (len(normals),):
            raise ShapeMismatch("one source tag per normal required")
        allowed = set(PART_NAMES) | {ORIGINAL_TAG}
        bad = set(np.unique(source)) - allowed
        if bad:
            raise ValueError(f"unknown source tags {sorted(bad)}")
        normals = normals / lengths[:, None]
        normals.setflags(write=False)
        source.setflags(write=False)
        self.normals = normals
        self.source = source

    def __len__(self):
        return len(self.normals)

    def tag_counts(self):
        tags, counts = np.unique(self.source, return_counts=True)
        return {str(t): int(c) for t, c in zip(tags, counts)}


def _slerp_rows(a, b, t):
    """Row-wise spherical interpolation from unit rows a toward b.

    t is the weight of b. Near-parallel rows fall back to normalized
    linear blending; near-opposite rows, where the great circle is
    ambiguous, snap to whichever endpoint carries more weight.
    """
    dot = np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
    omega = np.arccos(dot)
    out = np.empty_like(a)

    tiny = omega < 1e-7
    if tiny.any():
        mix = (1.0 - t[tiny, None]) * a[tiny] + t[tiny, None] * b[tiny]
        out[tiny] = mix / np.linalg.norm(mix, axis=1, keepdims=True)
    flip = omega > np.pi - 1e-7
    if flip.any():
        out[flip] = np.where(t[flip, None] >= 0.5, b[flip], a[flip])
    mid = ~(tiny | flip)
    if mid.any():
        om = omega[mid, None]
        so = np.sin(om)
        mix = np.sin((1.0 - t[mid, None]) * om) / so * a[mid] \
            + np.sin(t[mid, None] * om) / so * b[mid]
        out[mid] = mix / np.linalg.norm(mix, axis=1, keepdims=True)
    return out


def _with_normals(mesh):
    return mesh if mesh.normals is not None else compute_vertex_normals(mesh)


def transfer_normals(target, sources, masks, max_distance=MAX_TRANSFER_DISTANCE_MM):
    """Replace the target's normals part by part from retrieved meshes.

    ``sources`` maps part name to a retrieved mesh already warped into
    the target's frame; ``masks`` are the part masks on the target
    topology. Each masked target vertex takes the interpolated normal
    at its closest point on the part's source surface; feather-band
    vertices blend that with the original normal by spherical
    interpolation. Vertices farther than ``max_distance`` from the
    source surface, and all unmasked ("hair") vertices, keep their
    original normals and are tagged "original".

    Raises
    ------
    MissingSource
        A mask's part has no entry in ``sources``.
    """
    target = _with_normals(target)
    normals = target.normals.copy()
    tags = np.full(target.num_vertices, ORIGINAL_TAG, dtype="U16")

    for mask in sorted(masks, key=lambda mk: mk.name):
        source = sources.get(mask.name)
        if source is None:
            raise MissingSource(f"part {mask.name!r} has no retrieved mesh")
        source = _with_normals(source)
        verts = mask.vertices
        if len(verts) == 0:
            continue
        tri, d2, bary = MeshQuery(source).query(target.vertices[verts])
        new = interpolate_normals_batch(source, tri, bary)
        usable = (np.sqrt(d2) <= max_distance) \
            & (np.linalg.norm(new, axis=1) > 0.5)
        if not usable.all():
            logger.debug(
                "part %s: %d of %d vertices kept original normals",
                mask.name, int((~usable).sum()), len(verts),
            )
        use = verts[usable]
        blended = _slerp_rows(
            target.normals[use], new[usable], mask.feather[usable]
        )
        normals[use] = blended
        tags[use] = mask.name
    return NormalField(normals, tags)


def _edge_normals(mesh, field):
    """Unit average endpoint normal per edge; zero rows where the two
    endpoint normals cancel (those edges drop out of the normal term)."""
    edges = mesh.edges_unique()
    avg = field.normals[edges[:, 0]] + field.normals[edges[:, 1]]
    lengths = np.linalg.norm(avg, axis=1)
    ok = lengths > 1e-9
    out = np.zeros_like(avg)
    out[ok] = avg[ok] / lengths[ok, None]
    return edges, out, ok


def fuse_energy(vertices, mesh, field, weights, targets=None,
                point_weights=None):
    """Value of the fusion objective at the given vertex positions."""
    vertices = np.asarray(vertices, dtype=np.float64)
    targets, point_weights = _positional_constraints(
        mesh, targets, point_weights
    )
    pos = point_weights * ((vertices - targets) ** 2).sum(axis=1)
    edges, n_uv, ok = _edge_normals(mesh, field)
    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    norm = (np.einsum("ij,ij->i", d, n_uv) ** 2)[ok]
    return float(
        weights.lambda_pos * pos.sum() + weights.lambda_norm * norm.sum()
    )


def _positional_constraints(mesh, targets, point_weights):
    n = mesh.num_vertices
    if targets is None:
        targets = mesh.vertices
    else:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (n, 3):
            raise ShapeMismatch(
                f"positional targets must be ({n}, 3), got {targets.shape}"
            )
    if point_weights is None:
        point_weights = np.ones(n)
    else:
        point_weights = np.asarray(point_weights, dtype=np.float64).reshape(n)
        if np.any(point_weights < 0):
            raise ValueError("per-vertex position weights must be >= 0")
    return targets, point_weights


def fuse(mesh, field, weights=None, targets=None, point_weights=None):
    """Solve the position-normal least-squares merge.

    Minimizes lambda_pos * sum_v w_v ||x_v - t_v||^2 +
    lambda_norm * sum_edges ((x_u - x_v) . n_uv)^2 over new vertex
    positions x, where t are the positional targets (the mesh's own
    vertices by default), w the per-vertex position weights, and n_uv
    the unit average of the edge endpoints' target normals. The system
    is solved for the displacement from the input positions, so where
    the minimizer is not unique the solution closest to the input is
    returned. Topology is unchanged; normals are recomputed.

    Raises
    ------
    SingularSystem
        lambda_pos = 0 on a disconnected mesh: each component can
        translate freely, so the merge is underdetermined.
    SolverFailure
        The least-squares solver did not reach its tolerance.
    """
    if weights is None:
        weights = FusionWeights()
    if len(field) != mesh.num_vertices:
        raise ShapeMismatch(
            f"normal field has {len(field)} rows, mesh has "
            f"{mesh.num_vertices} vertices"
        )
    targets, point_weights = _positional_constraints(
        mesh, targets, point_weights
    )
    n = mesh.num_vertices

    if weights.lambda_norm == 0:
        new = np.where(point_weights[:, None] > 0, targets, mesh.vertices)
        return compute_vertex_normals(mesh.with_vertices(new))

    edges, n_uv, ok = _edge_normals(mesh, field)
    edges, n_uv = edges[ok], n_uv[ok]

    if weights.lambda_pos == 0 or not point_weights.any():
        graph = coo_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
        )
        parts = connected_components(graph, directed=False)[0]
        if parts > 1:
            raise SingularSystem(
                f"no positional term and {parts} disconnected components: "
                "each can translate freely"
            )

    # stacked rows: 3 positional rows per constrained vertex, then one
    # row per edge coupling the two endpoints along n_uv
    sq_pos = np.sqrt(weights.lambda_pos * point_weights)
    constrained = np.flatnonzero(sq_pos > 0)
    npos = len(constrained)

    rows = []
    cols = []
    vals = []
    rhs = []
    r = 0
    if npos:
        base = np.arange(npos) * 3
        rows.append(np.repeat(base, 3) + np.tile(np.arange(3), npos))
        cols.append(
            (np.repeat(constrained * 3, 3)
             + np.tile(np.arange(3), npos))
        )
        vals.append(np.repeat(sq_pos[constrained], 3))
        rhs.append(
            (sq_pos[constrained, None] * targets[constrained]).ravel()
        )
        r = 3 * npos
    ne = len(edges)
    if ne:
        sq_norm = np.sqrt(weights.lambda_norm)
        erow = r + np.arange(ne)
        rows.append(np.repeat(erow, 6))
        ecols = np.empty((ne, 6), dtype=np.int64)
        ecols[:, 0:3] = edges[:, 0:1] * 3 + np.arange(3)
        ecols[:, 3:6] = edges[:, 1:2] * 3 + np.arange(3)
        cols.append(ecols.ravel())
        evals = np.empty((ne, 6))
        evals[:, 0:3] = sq_norm * n_uv
        evals[:, 3:6] = -sq_norm * n_uv
        vals.append(evals.ravel())
        rhs.append(np.zeros(ne))
        r += ne

    a = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(r, 3 * n),
    ).tocsr()
    b = np.concatenate(rhs)

    # solve for the displacement from the input so that underdetermined
    # directions stay put instead of drifting toward the origin
    x0 = mesh.vertices.ravel()
    result = lsmr(a, b - a @ x0, atol=1e-8, btol=1e-8,
                  maxiter=20 * (3 * n))
    delta, istop = result[0], result[1]
    if istop not in (0, 1, 2, 4, 5):
        raise SolverFailure(
            f"fusion solver stopped with code {istop} after "
            f"{result[2]} iterations"
        )
    new = (x0 + delta).reshape(n, 3)
    return compute_vertex_normals(mesh.with_vertices(new))


def merge_report(target, field, source_ids):
    """Per-part summary of a merge: source id plus mean normal change.

    ``source_ids`` maps part name to the retrieved database id. The
    normal change of a part is the mean angle in degrees between the
    target's own normals and the field normals over the vertices the
    part tagged; parts that tagged no vertex report null.
    """
    target = _with_normals(target)
    report = {}
    for part in sorted(set(field.source) - {ORIGINAL_TAG} | set(source_ids)):
        sel = field.source == part
        entry = {
            "source_id": source_ids.get(part),
            "num_vertices": int(sel.sum()),
            "mean_normal_change_deg": None,
        }
        if sel.any():
            dots = np.clip(
                np.einsum(
                    "ij,ij->i", target.normals[sel], field.normals[sel]
                ),
                -1.0,
                1.0,
            )
            entry["mean_normal_change_deg"] = float(
                np.degrees(np.arccos(dots)).mean()
            )
        report[part] = entry
    report[ORIGINAL_TAG] = {
        "num_vertices": int((field.source == ORIGINAL_TAG).sum())
    }
    return report


def merge_expression(matches, frame, landmarks, generic, generic_landmarks,
                     masks, source_landmarks, weights=None, smoother=None,
                     match_ids=None, reg_params=None):
    """Re-run the merge against an expression depth frame.

    The five ``matches`` retrieved from the neutral input are warped
    toward the expression frame's lifted landmarks, the generic head is
    densely corresponded to the expression surface, and normal transfer
    plus fusion run exactly as in the neutral path. ``landmarks`` are
    the expression frame's 2D landmarks; ``source_landmarks`` maps
    landmark names to template vertex ids on the matched meshes;
    ``smoother`` optionally denoises the backprojected surface before
    registration.

    Returns (fused mesh, merge report).
    """
    if weights is None:
        weights = FusionWeights()
    missing = [p for p in (mk.name for mk in masks) if p not in matches]
    if missing:
        raise MissingSource(f"parts {missing} have no retrieved mesh")
    absent = [n for n in ANCHOR_NAMES if not landmarks.has(n)]
    if absent:
        raise MissingAnchor(
            f"expression landmarks lack the anchors {absent}"
        )

    lifted = lift_landmarks(frame, landmarks)
    rect = derive_face_rect(landmarks, frame)
    surface, _ = backproject(frame, rect)
    if smoother is not None:
        surface = smoother.transform(surface)

    # the capture lives in the sensor frame; move it onto the database
    # frame with a rigid landmark fit so grid descriptors and retrieved
    # part sources stay comparable across entries
    common = generic_landmarks.common_valid(lifted)
    if len(common) < 4:
        raise InsufficientLandmarks(
            f"only {len(common)} landmarks shared with the template; "
            "cannot pose the capture"
        )
    pose = procrustes(
        lifted.positions(common),
        generic_landmarks.positions(common),
        allow_scale=False,
    )
    surface = pose.apply_to_mesh(surface)
    lifted = lifted.with_points(pose.apply(lifted.points))

    gprime, corr = dense_correspond(
        generic, surface, generic_landmarks, lifted, **(reg_params or {})
    )

    names = [n for n in source_landmarks if lifted.has(n)]
    if len(names) < 4:
        raise InsufficientLandmarks(
            f"only {len(names)} expression landmarks map to the matched "
            "meshes; the part warp is underdetermined"
        )
    dst = np.array([lifted.get(n) for n in names])
    ids = np.array([source_landmarks[n] for n in names])
    warped = {
        part: landmark_warp(_with_normals(mesh), mesh.vertices[ids], dst)
        for part, mesh in matches.items()
    }

    field = transfer_normals(gprime, warped, masks)
    closest = corr.closest_points(surface)
    matched = corr.matched
    pos_targets = np.where(matched[:, None], closest, gprime.vertices)
    pos_weights = np.where(matched, 1.0, UNMATCHED_POSITION_WEIGHT)
    fused = fuse(gprime, field, weights, targets=pos_targets,
                 point_weights=pos_weights)
    report = merge_report(gprime, field, dict(match_ids or {}))
    return fused, report


class PositionNormalFuser(BaseEstimator):
    """Estimator wrapper around normal transfer plus fusion.

    fit() computes the transferred normal field and the fused mesh for
    one target; the results are exposed as ``field_`` and ``fused_``.
    """

    def __init__(self, lambda_pos=DEFAULT_LAMBDA_POS,
                 lambda_norm=DEFAULT_LAMBDA_NORM,
                 max_distance=MAX_TRANSFER_DISTANCE_MM):
        self.lambda_pos = lambda_pos
        self.lambda_norm = lambda_norm
        self.max_distance = max_distance

    def fit(self, target, sources, masks, targets=None, point_weights=None):
        weights = FusionWeights(self.lambda_pos, self.lambda_norm)
        self.field_ = transfer_normals(
            target, sources, masks, max_distance=self.max_distance
        )
        self.fused_ = fuse(
            target, self.field_, weights, targets=targets,
            point_weights=point_weights,
        )
        return self
