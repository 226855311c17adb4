"""Tests for synthetic depth rendering."""

import numpy as np
import pytest

from depthface import dataset, render
from depthface.depthio import backproject, derive_face_rect, lift_landmarks
from depthface.geometry import MeshQuery, TriangleMesh


@pytest.fixture(scope="module")
def head():
    mesh, _, _ = dataset.base_head()
    return mesh


@pytest.fixture(scope="module")
def clean_frame(head):
    return render.render_depth(head, noise_sigma=0.0, dropout_rate=0.0)


class TestCoordinateMaps:
    def test_world_camera_involution(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(0.0, 80.0, (200, 3))
        back = render.camera_to_world(render.world_to_camera(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_orientation_involution(self):
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(50, 3))
        back = render.orientation_to_world(render.orientation_to_world(dirs))
        np.testing.assert_allclose(back, dirs, atol=1e-12)

    def test_origin_maps_to_standoff(self):
        cam = render.world_to_camera(np.zeros((1, 3)), camera_distance=700.0)
        np.testing.assert_allclose(cam, [[0.0, 0.0, 700.0]])

    def test_nearer_world_points_have_smaller_depth(self):
        cam = render.world_to_camera([[0.0, 0.0, 100.0], [0.0, 0.0, 0.0]])
        assert cam[0, 2] < cam[1, 2]


class TestRenderDepth:
    def test_samples_lie_on_surface(self, head, clean_frame):
        lm = render.render_landmarks(head)
        rect = derive_face_rect(lm, clean_frame)
        cloud, _ = backproject(clean_frame, rect)
        world = render.camera_to_world(cloud.vertices)
        _, d2, _ = MeshQuery(head).query(world)
        assert np.sqrt(d2.max()) < 1e-9

    def test_plausible_coverage(self, clean_frame):
        assert clean_frame.num_valid > 5000
        depths = clean_frame.depth[clean_frame.depth > 0]
        assert depths.min() > 500.0
        assert depths.max() < render.DEFAULT_CAMERA_DISTANCE_MM

    def test_deterministic(self, head):
        a = render.render_depth(head, seed=7)
        b = render.render_depth(head, seed=7)
        assert np.array_equal(a.depth, b.depth)

    def test_seed_changes_noise(self, head):
        a = render.render_depth(head, seed=7)
        b = render.render_depth(head, seed=8)
        assert not np.array_equal(a.depth, b.depth)

    def test_noise_and_dropout_statistics(self, head, clean_frame):
        noisy = render.render_depth(head, seed=3)
        was_valid = clean_frame.depth > 0
        survived = was_valid & (noisy.depth > 0)
        diff = noisy.depth[survived] - clean_frame.depth[survived]
        assert abs(diff.std() - render.DEFAULT_NOISE_SIGMA_MM) < 0.3
        assert abs(diff.mean()) < 0.2
        dropped = 1.0 - survived.sum() / was_valid.sum()
        assert abs(dropped - render.DEFAULT_DROPOUT_RATE) < 0.02

    def test_occlusion_keeps_nearer_surface(self):
        # two stacked quads with outward winding; the z=30 one wins
        verts = np.array(
            [
                [-40.0, -40.0, 0.0], [40.0, -40.0, 0.0],
                [-40.0, 40.0, 0.0], [40.0, 40.0, 0.0],
                [-40.0, -40.0, 30.0], [40.0, -40.0, 30.0],
                [-40.0, 40.0, 30.0], [40.0, 40.0, 30.0],
            ]
        )
        tris = np.array(
            [[0, 1, 3], [0, 3, 2], [4, 5, 7], [4, 7, 6]]
        )
        mesh = TriangleMesh(verts, tris)
        frame = render.render_depth(mesh, noise_sigma=0.0, dropout_rate=0.0)
        depths = frame.depth[frame.depth > 0]
        expected = render.DEFAULT_CAMERA_DISTANCE_MM - 30.0
        np.testing.assert_allclose(depths, expected, atol=1e-9)

    def test_backfaces_invisible(self):
        # same quad wound away from the sensor renders nothing
        verts = np.array(
            [
                [-40.0, -40.0, 0.0], [40.0, -40.0, 0.0],
                [-40.0, 40.0, 0.0], [40.0, 40.0, 0.0],
            ]
        )
        tris = np.array([[0, 3, 1], [0, 2, 3]])
        frame = render.render_depth(
            TriangleMesh(verts, tris), noise_sigma=0.0, dropout_rate=0.0
        )
        assert frame.num_valid == 0

    def test_rejects_mesh_behind_camera(self, head):
        far = head.with_vertices(head.vertices + [0.0, 0.0, 2000.0])
        with pytest.raises(ValueError, match="behind"):
            render.render_depth(far)

    def test_rejects_bad_noise_params(self, head):
        with pytest.raises(ValueError):
            render.render_depth(head, noise_sigma=-1.0)
        with pytest.raises(ValueError):
            render.render_depth(head, dropout_rate=1.0)


class TestRenderLandmarks:
    def test_all_visible_on_head(self, head):
        lm = render.render_landmarks(head)
        assert len(lm) == 83
        assert lm.valid.all()
        lm.check_full_schema()

    def test_projection_matches_pinhole(self, head):
        lm = render.render_landmarks(head)
        k = render.default_intrinsics()
        ids = dataset.landmark_vertex_ids(("sellion",))
        cam = render.world_to_camera(head.vertices[ids])
        u = cam[0, 0] * k.fx / cam[0, 2] + k.cx
        v = cam[0, 1] * k.fy / cam[0, 2] + k.cy
        np.testing.assert_allclose(lm.get("sellion"), [u, v], atol=1e-9)

    def test_lift_recovers_camera_frame_positions(self, head, clean_frame):
        lm = render.render_landmarks(head)
        lifted = lift_landmarks(clean_frame, lm)
        cam = render.world_to_camera(
            head.vertices[dataset.landmark_vertex_ids()]
        )
        err = np.linalg.norm(lifted.points - cam, axis=1)
        # frontal landmarks sit on well-sampled surface; silhouette and
        # ear points live at grazing incidence where the nearest valid
        # pixel can be many mm away in depth
        lateral = lifted.silhouette_mask() | np.isin(
            lifted.names, ["tragion_l", "tragion_r", "zygion_l", "zygion_r"]
        )
        frontal = lifted.valid & ~lateral
        assert err[frontal].max() < 2.0
        assert err[lifted.valid].max() < 15.0
        assert np.median(err[lifted.valid]) < 2.0

    def test_off_frame_landmarks_flagged(self, head):
        shifted = head.with_vertices(head.vertices + [500.0, 0.0, 0.0])
        lm = render.render_landmarks(shifted)
        assert not lm.valid.all()

    def test_wrong_topology_rejected(self, head):
        tiny = TriangleMesh(
            head.vertices[:3], np.array([[0, 1, 2]])
        )
        with pytest.raises(ValueError, match="topology"):
            render.render_landmarks(tiny)
