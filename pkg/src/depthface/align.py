"""Rigid, thin-plate-spline, and dense nonrigid alignment.

Pose normalization is similarity Procrustes over internal landmark
pairs. Dense correspondence deforms the generic head toward the input
mesh: a landmark-driven thin-plate-spline initialization followed by
iterated closest-point refinement with per-vertex displacements, an
edge-difference smoothness term, and a decaying landmark term. The
deformed generic carries a per-vertex barycentric correspondence onto
the input surface; vertices farther than a match cutoff are holes.
"""

import logging
import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from .errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    InsufficientLandmarks,
    NoConvergence,
    SolverFailure,
)
from .geometry import BarycentricLocation, MeshQuery, compute_vertex_normals
from .validation import check_points

logger = logging.getLogger(__name__)

# G' vertices farther than this (mm) from the input surface are holes
# (sensor dropouts or regions outside the depth crop).
MATCH_DISTANCE_MM = 15.0

MIN_INPUT_VERTICES = 500

# Energies at or below this (mm^2 scale) count as fully converged;
# below it, float rounding dominates and accept/reject is meaningless.
_ENERGY_FLOOR = 1e-10


class RigidTransform:
    """Similarity transform x -> scale * rotation @ x + translation."""

    __slots__ = ("rotation", "translation", "scale")

    def __init__(self, rotation, translation, scale=1.0):
        rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1 within 1e-9")
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        self.scale = float(scale)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_to_mesh(self, mesh):
        out = mesh.with_vertices(self.apply(mesh.vertices))
        if mesh.normals is not None:
            # rotation preserves unit length; scale and translation do
            # not touch normals
            out = out.with_normals(mesh.normals @ self.rotation.T)
        return out

    def inverse(self):
        rot_inv = self.rotation.T
        return RigidTransform(
            rot_inv, -rot_inv @ self.translation / self.scale, 1.0 / self.scale
        )

    def __repr__(self):
        return (
            f"RigidTransform(scale={self.scale:.6g}, "
            f"translation={np.array2string(self.translation, precision=3)})"
        )


def procrustes(source, target, allow_scale=True):
    """Best-fit similarity transform from source points onto target points.

    Minimizes the sum of squared distances ``|| s R p + t - q ||^2`` in
    closed form via SVD of the cross-covariance; reflections are
    excluded. With ``allow_scale=False`` the scale is fixed to 1.

    Raises
    ------
    DegenerateConfiguration
        Fewer than 3 pairs, or a collinear configuration (the rotation
        about the line is unconstrained).
    """
    src = check_points(source, "source", min_rows=1)
    dst = check_points(target, "target", min_rows=1)
    if len(src) != len(dst):
        raise DegenerateConfiguration(
            f"source has {len(src)} points but target has {len(dst)}"
        )
    if len(src) < 3:
        raise DegenerateConfiguration("procrustes needs at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    s_c = src - mu_s
    t_c = dst - mu_t
    cov = t_c.T @ s_c / len(src)
    u, d, vt = np.linalg.svd(cov)
    if d[0] < 1e-12 or d[1] < 1e-10 * d[0]:
        raise DegenerateConfiguration(
            "point configuration is collinear or coincident; "
            "rotation is underdetermined"
        )
    flip = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    signs = np.array([1.0, 1.0, flip])
    rotation = u @ np.diag(signs) @ vt
    if allow_scale:
        var_s = (s_c**2).sum() / len(src)
        scale = float((d * signs).sum() / var_s)
        if not scale > 0:
            raise DegenerateConfiguration(f"non-positive fitted scale {scale}")
    else:
        scale = 1.0
    translation = mu_t - scale * rotation @ mu_s
    return RigidTransform(rotation, translation, scale)


class ThinPlateSplineWarp(BaseEstimator):
    """Scattered-data deformation field interpolating landmark motion.

    Fits displacement vectors at control points with the 3D radial
    kernel U(r) = r plus an affine term, so that every source landmark
    maps exactly onto its destination (when ``smoothing`` is 0) and the
    field extends smoothly over space. Fitting displacements rather
    than absolute positions makes the identity mapping exactly
    representable with zero weights.

    Attributes after fit: ``control_points_``, ``kernel_weights_``,
    ``affine_``, and ``affine_only_`` (True when the control set was
    coplanar and only the affine term could be fit).
    """

    def __init__(self, smoothing=0.0):
        self.smoothing = smoothing

    def fit(self, src, dst):
        src = check_points(src, "src landmarks", min_rows=4)
        dst = check_points(dst, "dst landmarks", min_rows=4)
        if len(src) != len(dst):
            raise DegenerateConfiguration(
                f"src has {len(src)} landmarks but dst has {len(dst)}"
            )
        n = len(src)
        disp = dst - src
        self.control_points_ = src
        self.affine_only_ = bool(_is_coplanar(src))
        if not self.affine_only_:
            kernel = cdist(src, src)
            if self.smoothing:
                kernel = kernel + self.smoothing * np.eye(n)
            poly = np.column_stack([np.ones(n), src])
            system = np.zeros((n + 4, n + 4))
            system[:n, :n] = kernel
            system[:n, n:] = poly
            system[n:, :n] = poly.T
            rhs = np.vstack([disp, np.zeros((4, 3))])
            try:
                sol = np.linalg.solve(system, rhs)
            except np.linalg.LinAlgError:
                logger.warning("TPS system singular; falling back to affine fit")
                self.affine_only_ = True
            else:
                self.kernel_weights_ = sol[:n]
                self.affine_ = sol[n:]
        if self.affine_only_:
            poly = np.column_stack([np.ones(n), src])
            self.kernel_weights_ = np.zeros((n, 3))
            self.affine_, *_ = np.linalg.lstsq(poly, disp, rcond=None)
        return self

    def transform(self, points):
        points = check_points(points, "points", min_rows=1)
        poly = np.column_stack([np.ones(len(points)), points])
        disp = poly @ self.affine_
        if not self.affine_only_:
            disp = disp + cdist(points, self.control_points_) @ self.kernel_weights_
        return points + disp


def _is_coplanar(points, rel_tol=1e-9):
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    return svals[0] < 1e-12 or svals[2] < rel_tol * svals[0]


def landmark_warp(mesh, src_lm, dst_lm):
    """Deform a whole mesh by the thin-plate-spline field that carries
    src landmarks onto dst landmarks.

    Topology is unchanged; normals are recomputed when the input had
    them. The returned mesh carries a ``warp_affine_only`` flag set when
    the control set was coplanar and the field degraded to an affine
    fit.
    """
    warp = ThinPlateSplineWarp().fit(src_lm, dst_lm)
    out = mesh.with_vertices(warp.transform(mesh.vertices))
    if mesh.normals is not None:
        out = compute_vertex_normals(out)
    out.warp_affine_only = warp.affine_only_
    if warp.affine_only_:
        logger.warning("landmark_warp: coplanar landmarks, affine-only fallback")
    return out


class DenseCorrespondence:
    """Per-vertex barycentric correspondence from G' onto the input mesh.

    ``triangles[i]`` is the input triangle closest to G' vertex i (or -1
    for unmatched holes), ``weights[i]`` the barycentric coordinates of
    the closest point, ``distances[i]`` the Euclidean distance in mm,
    and ``matched[i]`` whether the distance is within the match cutoff.
    """

    def __init__(self, triangles, weights, distances, matched):
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.distances = np.asarray(distances, dtype=np.float64)
        self.matched = np.asarray(matched, dtype=bool)
        n = len(self.triangles)
        if not (len(self.weights) == len(self.distances) == len(self.matched) == n):
            raise ValueError("correspondence arrays disagree in length")

    def __len__(self):
        return len(self.triangles)

    @property
    def num_matched(self):
        return int(self.matched.sum())

    def location(self, i):
        if not self.matched[i]:
            raise ValueError(f"vertex {i} is unmatched")
        return BarycentricLocation(self.triangles[i], self.weights[i])

    def closest_points(self, mesh):
        """Closest points on the given mesh; unmatched rows are NaN."""
        out = np.full((len(self), 3), np.nan)
        m = self.matched
        corners = mesh.vertices[mesh.triangles[self.triangles[m]]]
        out[m] = np.einsum("ij,ijk->ik", self.weights[m], corners)
        return out


class NonrigidRegistration(BaseEstimator):
    """Deform a template mesh onto a target surface.

    Initialization warps the template by the thin-plate spline through
    the shared landmarks; ``init_smoothing`` relaxes that spline's
    interpolation, which tames its extrapolation when the landmarks
    cover only part of the template, and ``init_warp`` (any object with
    a ``transform(points)`` method) replaces the initialization warp
    outright. Refinement alternates closest-point
    correspondence with a sparse linear solve minimizing

        w_data     * sum over matched vertices of the squared
                     point-to-plane distance to the target,
      + w_smooth   * sum over template edges of the squared difference
                     of endpoint displacements (measured from the
                     initialization),
      + w_landmark * sum over landmark vertices of the squared distance
                     to the target landmark,

    with w_landmark halved every ``decay_every`` iterations. The solve
    minimizes the quadratic at the current correspondence exactly, but
    re-correspondence afterwards can raise the point-to-plane energy;
    such steps are damped by halving toward the current iterate. When
    even the most damped step increases the energy, a small increase
    (below sqrt(tol), relatively) means the iterate already sits at the
    scheme's oscillation floor and iteration stops; a larger one is a
    rejection, and two consecutive rejected iterations abort. Iteration
    also stops when the relative energy decrease falls below ``tol`` or
    after ``max_iter`` iterations.

    Attributes after fit: ``deformed_`` (the registered mesh),
    ``correspondence_`` (DenseCorrespondence onto the target),
    ``energy_trace_`` (accepted energies, non-increasing), ``n_iter_``.
    """

    def __init__(
        self,
        w_data=1.0,
        w_smooth=50.0,
        w_landmark=10.0,
        max_iter=50,
        tol=1e-4,
        match_dist=MATCH_DISTANCE_MM,
        decay_every=10,
        decay_factor=0.5,
        init_smoothing=0.0,
        init_warp=None,
    ):
        self.w_data = w_data
        self.w_smooth = w_smooth
        self.w_landmark = w_landmark
        self.max_iter = max_iter
        self.tol = tol
        self.match_dist = match_dist
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.init_smoothing = init_smoothing
        self.init_warp = init_warp

    def fit(self, template, target, lm_template, lm_target):
        """Register template onto target guided by paired 3D landmarks.

        Landmark arrays are (k, 3) in corresponding order, already
        filtered to the valid common subset by the caller.
        """
        if target.num_vertices < MIN_INPUT_VERTICES:
            raise DegenerateGeometry(
                f"target has {target.num_vertices} vertices; "
                f"at least {MIN_INPUT_VERTICES} required"
            )
        lm_template = check_points(lm_template, "template landmarks", min_rows=1)
        lm_target = check_points(lm_target, "target landmarks", min_rows=1)
        if len(lm_template) != len(lm_target):
            raise InsufficientLandmarks("landmark sets must pair up")
        if len(lm_template) < 4:
            raise InsufficientLandmarks(
                f"{len(lm_template)} landmark pairs; at least 4 required"
            )
        if self.init_warp is not None:
            x_init = self.init_warp.transform(template.vertices)
        else:
            x_init = ThinPlateSplineWarp(smoothing=self.init_smoothing).fit(
                lm_template, lm_target
            ).transform(template.vertices)
        n = template.num_vertices
        edges = template.edges_unique()
        lm_vertex = cKDTree(template.vertices).query(lm_template)[1]
        query = MeshQuery(target)
        face_cross = target.face_cross()
        face_normals = face_cross / np.linalg.norm(face_cross, axis=1, keepdims=True)

        # smoothness graph Laplacian; constant across iterations
        ones = np.ones(len(edges))
        lap = sp.coo_matrix(
            (
                np.concatenate([ones, ones, -ones, -ones]),
                (
                    np.concatenate([edges[:, 0], edges[:, 1],
                                    edges[:, 0], edges[:, 1]]),
                    np.concatenate([edges[:, 0], edges[:, 1],
                                    edges[:, 1], edges[:, 0]]),
                ),
            ),
            shape=(n, n),
        ).tocsr()

        x = x_init.copy()
        corr, closest = self._correspond(query, target, x)
        w_lm = float(self.w_landmark)
        trace = [
            self._energy(x, x_init, corr, closest, edges, face_normals,
                         lm_vertex, lm_target, w_lm)
        ]
        rejections = 0
        iteration = 0
        while iteration < self.max_iter and trace[-1] > _ENERGY_FLOOR:
            if iteration and iteration % self.decay_every == 0:
                w_lm *= self.decay_factor
            proposal = self._solve_step(
                x_init, corr, closest, lap, face_normals, lm_vertex,
                lm_target, w_lm,
            )
            # the proposal minimizes the quadratic at the current
            # correspondence; damp it if re-correspondence raises the
            # true energy
            best = None
            step = 1.0
            for _ in range(8):
                candidate = x + step * (proposal - x)
                cand_corr, cand_closest = self._correspond(query, target, candidate)
                cand_energy = self._energy(candidate, x_init, cand_corr,
                                           cand_closest, edges, face_normals,
                                           lm_vertex, lm_target, w_lm)
                if best is None or cand_energy < best[0]:
                    best = (cand_energy, candidate, cand_corr, cand_closest)
                if cand_energy <= trace[-1]:
                    break
                step *= 0.5
            cand_energy, candidate, cand_corr, cand_closest = best
            iteration += 1
            if cand_energy <= trace[-1]:
                previous = trace[-1]
                x = candidate
                corr, closest = cand_corr, cand_closest
                trace.append(cand_energy)
                rejections = 0
                if (previous - cand_energy) / previous < self.tol:
                    break
            elif cand_energy - trace[-1] <= (
                math.sqrt(self.tol) * max(trace[-1], _ENERGY_FLOOR)
            ):
                # even damped steps cannot descend and the gap is small:
                # the iterate sits below the scheme's oscillation floor,
                # whose amplitude does not shrink with step size
                break
            else:
                rejections += 1
                logger.info(
                    "registration step rejected (%.6g -> %.6g)",
                    trace[-1], cand_energy,
                )
                if rejections >= 2:
                    raise NoConvergence(
                        "registration energy increased two consecutive iterations"
                    )

        self.deformed_ = compute_vertex_normals(template.with_vertices(x))
        self.correspondence_ = corr
        self.energy_trace_ = trace
        self.n_iter_ = iteration
        return self

    def _correspond(self, query, target, x):
        tri, d2, bary = query.query(x)
        dist = np.sqrt(d2)
        matched = dist <= self.match_dist
        corners = target.vertices[target.triangles[tri]]
        closest = np.einsum("ij,ijk->ik", bary, corners)
        closest[~matched] = np.nan
        return (
            DenseCorrespondence(np.where(matched, tri, -1), bary, dist, matched),
            closest,
        )

    def _energy(self, x, x_init, corr, closest, edges, face_normals, lm_vertex,
                lm_target, w_lm):
        total = 0.0
        m = corr.matched
        if m.any():
            normals = face_normals[corr.triangles[m]]
            gaps = np.einsum("ij,ij->i", x[m] - closest[m], normals)
            total += self.w_data * float(gaps @ gaps)
        diff = (x[edges[:, 0]] - x[edges[:, 1]]) - (
            x_init[edges[:, 0]] - x_init[edges[:, 1]]
        )
        total += self.w_smooth * float((diff * diff).sum())
        lm_gap = x[lm_vertex] - lm_target
        total += w_lm * float((lm_gap * lm_gap).sum())
        return total

    def _solve_step(self, x_init, corr, closest, lap, face_normals, lm_vertex,
                    lm_target, w_lm):
        n = len(x_init)
        m = corr.matched

        lm_weight = np.zeros(n)
        np.add.at(lm_weight, lm_vertex, w_lm)
        scalar = self.w_smooth * lap + sp.diags(lm_weight)
        system = sp.kron(scalar, sp.eye(3), format="coo")

        rhs = self.w_smooth * (lap @ x_init)
        np.add.at(rhs, lm_vertex, w_lm * lm_target)

        if m.any():
            # point-to-plane data term: rank-one blocks n n^T per
            # matched vertex
            normals = face_normals[corr.triangles[m]]
            blocks = self.w_data * np.einsum("ij,ik->ijk", normals, normals)
            base = 3 * np.flatnonzero(m)
            rows = base[:, None, None] + np.arange(3)[None, :, None]
            cols = base[:, None, None] + np.arange(3)[None, None, :]
            rows = np.broadcast_to(rows, blocks.shape)
            cols = np.broadcast_to(cols, blocks.shape)
            system = system + sp.coo_matrix(
                (blocks.ravel(), (rows.ravel(), cols.ravel())),
                shape=(3 * n, 3 * n),
            )
            scal = self.w_data * np.einsum("ij,ij->i", closest[m], normals)
            rhs[m] += scal[:, None] * normals

        try:
            solution = splu(system.tocsc()).solve(rhs.ravel())
        except RuntimeError as exc:
            raise SolverFailure(f"registration solve failed: {exc}") from exc
        if not np.all(np.isfinite(solution)):
            raise SolverFailure("registration solve produced non-finite values")
        return solution.reshape(n, 3)


def dense_correspond(generic, input_mesh, lm_generic, lm_input, **params):
    """Deform the generic head onto the input mesh.

    Landmark sets are matched by name over entries valid in both; at
    least 4 shared valid landmarks are required.

    Returns (G', DenseCorrespondence from G' vertices onto input).
    """
    names = lm_generic.common_valid(lm_input)
    if len(names) < 4:
        raise InsufficientLandmarks(
            f"only {len(names)} landmarks shared between generic and input"
        )
    reg = NonrigidRegistration(**params).fit(
        generic,
        input_mesh,
        lm_generic.positions(names),
        lm_input.positions(names),
    )
    return reg.deformed_, reg.correspondence_


def transfer_part_masks(masks, gprime, correspondence, input_mesh):
    """Carry part masks from G' onto the input mesh.

    Each input vertex adopts the mask membership and feather weight of
    its nearest G' vertex; input vertices whose nearest G' vertex is
    unmatched receive nothing (hole regions stay unassigned).
    """
    from .features import PartMask

    nearest = cKDTree(gprime.vertices).query(input_mesh.vertices)[1]
    usable = correspondence.matched[nearest]
    n_g = gprime.num_vertices
    out = []
    for mask in masks:
        member = np.zeros(n_g, dtype=bool)
        member[mask.vertices] = True
        weight_of = np.zeros(n_g)
        weight_of[mask.vertices] = mask.feather
        selected = usable & member[nearest]
        vertex_ids = np.flatnonzero(selected)
        out.append(
            PartMask(mask.name, vertex_ids, weight_of[nearest[vertex_ids]])
        )
    return out
