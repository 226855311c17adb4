"""Synthetic depth rendering of head meshes for end-to-end evaluation.

Produces the depth frame a forward-looking range sensor would capture,
so the reconstruction pipeline can be exercised without physical
hardware. The virtual camera sits on the world +z axis at a fixed
standoff, looking back at the head around the origin; the camera frame
follows the depth-image convention (x right, y down, z into the scene)
so rendered frames back-project with the standard pinhole formulas.

World and camera coordinates are related by the involutive rigid map
(x, y, z) <-> (x, -y, D - z) with D the camera standoff, exposed here
as world_to_camera / camera_to_world so evaluation code can compare
reconstructions against ground-truth meshes in either frame.
"""

import logging

import numpy as np

from .dataset import FULL83_GROUPS, FULL83_NAMES, landmark_vertex_ids
from .depthio import DepthFrame, Intrinsics, LandmarkSet

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = (480, 640)
DEFAULT_CAMERA_DISTANCE_MM = 760.0
DEFAULT_NOISE_SIGMA_MM = 2.0
DEFAULT_DROPOUT_RATE = 0.05


def default_intrinsics():
    """VGA-class pinhole model used by all synthetic renders."""
    return Intrinsics(fx=585.0, fy=585.0, cx=320.0, cy=240.0)


def world_to_camera(points, camera_distance=DEFAULT_CAMERA_DISTANCE_MM):
    """Map world-frame points (mm) into the sensor frame.

    The map is an involution, so it doubles as camera_to_world.
    """
    points = np.asarray(points, dtype=np.float64)
    return np.column_stack(
        [points[:, 0], -points[:, 1], camera_distance - points[:, 2]]
    )


camera_to_world = world_to_camera


def orientation_to_world(directions):
    """Rotate camera-frame direction vectors (e.g. normals) to world.

    Directions carry no translation, so only the axis flips apply; the
    map is again its own inverse.
    """
    directions = np.asarray(directions, dtype=np.float64)
    return directions * np.array([1.0, -1.0, -1.0])


def render_depth(
    mesh,
    intrinsics=None,
    image_size=DEFAULT_IMAGE_SIZE,
    camera_distance=DEFAULT_CAMERA_DISTANCE_MM,
    noise_sigma=DEFAULT_NOISE_SIGMA_MM,
    dropout_rate=DEFAULT_DROPOUT_RATE,
    seed=0,
):
    """Rasterize a world-frame mesh into a noisy synthetic DepthFrame.

    Hidden surfaces are resolved with a z-buffer; depth across each
    triangle is interpolated perspective-correctly, so noiseless
    samples lie exactly on the surface. Triangles facing away from the
    sensor are skipped, which assumes the usual outward winding; holes
    in the front surface therefore stay holes instead of exposing the
    inside of the head. Gaussian depth noise and uniform dropout are
    applied to the valid samples afterwards, driven by the seed alone.
    """
    if intrinsics is None:
        intrinsics = default_intrinsics()
    height, width = (int(s) for s in image_size)
    if height < 1 or width < 1:
        raise ValueError(f"bad image size {image_size!r}")
    if noise_sigma < 0 or not 0 <= dropout_rate < 1:
        raise ValueError(
            f"bad noise parameters sigma={noise_sigma}, dropout={dropout_rate}"
        )

    cam = world_to_camera(mesh.vertices, camera_distance)
    z = cam[:, 2]
    if np.any(z <= 1.0):
        raise ValueError(
            "mesh extends behind the camera; increase camera_distance"
        )
    us = cam[:, 0] * intrinsics.fx / z + intrinsics.cx
    vs = cam[:, 1] * intrinsics.fy / z + intrinsics.cy
    inv_z = 1.0 / z

    tris = mesh.triangles
    a = cam[tris[:, 0]]
    b = cam[tris[:, 1]]
    c = cam[tris[:, 2]]
    # facing normals point back toward the sensor (negative camera z)
    facing = np.cross(b - a, c - a)[:, 2] < 0.0

    zbuf = np.full((height, width), np.inf)
    for t in np.nonzero(facing)[0]:
        tu = us[tris[t]]
        tv = vs[tris[t]]
        tw = inv_z[tris[t]]
        u0 = max(int(np.ceil(tu.min())), 0)
        u1 = min(int(np.floor(tu.max())), width - 1)
        v0 = max(int(np.ceil(tv.min())), 0)
        v1 = min(int(np.floor(tv.max())), height - 1)
        if u0 > u1 or v0 > v1:
            continue
        det = (tu[1] - tu[0]) * (tv[2] - tv[0]) - (tu[2] - tu[0]) * (tv[1] - tv[0])
        if abs(det) < 1e-12:
            continue
        pu, pv = np.meshgrid(
            np.arange(u0, u1 + 1), np.arange(v0, v1 + 1)
        )
        du = pu - tu[0]
        dv = pv - tv[0]
        l1 = (du * (tv[2] - tv[0]) - dv * (tu[2] - tu[0])) / det
        l2 = (dv * (tu[1] - tu[0]) - du * (tv[1] - tv[0])) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        # 1/z is affine over the screen triangle; inverting it back
        # gives the exact ray-surface depth at each pixel center
        iz = l0[inside] * tw[0] + l1[inside] * tw[1] + l2[inside] * tw[2]
        depth = 1.0 / iz
        rows = pv[inside]
        cols = pu[inside]
        closer = depth < zbuf[rows, cols]
        zbuf[rows[closer], cols[closer]] = depth[closer]

    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    valid = depth > 0.0
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning("rendered frame has no valid pixels")
    rng = np.random.default_rng(seed)
    if noise_sigma > 0 and n_valid:
        depth[valid] += rng.normal(0.0, noise_sigma, n_valid)
    if dropout_rate > 0 and n_valid:
        drop = rng.random(n_valid) < dropout_rate
        rows, cols = np.nonzero(valid)
        depth[rows[drop], cols[drop]] = 0.0
    np.clip(depth, 0.0, None, out=depth)
    return DepthFrame(depth, intrinsics)


def render_landmarks(
    mesh,
    intrinsics=None,
    image_size=DEFAULT_IMAGE_SIZE,
    camera_distance=DEFAULT_CAMERA_DISTANCE_MM,
):
    """Project the 83 canonical landmark vertices to pixel coordinates.

    The mesh must live on the shared head topology, so the canonical
    landmark vertex table applies. Landmarks projecting outside the
    frame are flagged invalid rather than dropped.
    """
    if intrinsics is None:
        intrinsics = default_intrinsics()
    height, width = (int(s) for s in image_size)
    ids = landmark_vertex_ids(FULL83_NAMES)
    if ids.max() >= mesh.num_vertices:
        raise ValueError(
            "mesh is not on the shared head topology; cannot place landmarks"
        )
    cam = world_to_camera(mesh.vertices[ids], camera_distance)
    z = cam[:, 2]
    uv = np.column_stack(
        [
            cam[:, 0] * intrinsics.fx / z + intrinsics.cx,
            cam[:, 1] * intrinsics.fy / z + intrinsics.cy,
        ]
    )
    valid = (
        (z > 1.0)
        & (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1)
        & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
    )
    return LandmarkSet(FULL83_NAMES, uv, FULL83_GROUPS, valid)
