"""Depth frame ingestion, landmark files, back-projection, lifting."""

import json

import numpy as np
import pytest

from depthface.depthio import (
    DepthFrame,
    Intrinsics,
    LandmarkSet,
    backproject,
    derive_face_rect,
    landmarks_from_records,
    lift_landmarks,
    load_depth,
    load_landmarks,
    save_depth,
    save_landmarks,
)
from depthface.errors import (
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


KINECT = Intrinsics(fx=585.0, fy=585.0, cx=320.0, cy=240.0)


def write_frame(tmp_path, depth, intrinsics=KINECT, name="frame.pgm"):
    frame = DepthFrame(depth, intrinsics)
    path = tmp_path / name
    save_depth(frame, path)
    return path


def full_landmark_records(dim=2):
    """83 records: 19 silhouette plus 64 internal including both anchors."""
    recs = []
    for i in range(19):
        recs.append({"name": f"silhouette_{i:02d}", "group": "silhouette"})
    recs.append({"name": "sellion", "group": "internal"})
    recs.append({"name": "chin_tip", "group": "internal"})
    for i in range(62):
        recs.append({"name": f"internal_{i:02d}", "group": "internal"})
    rng = np.random.default_rng(0)
    for rec in recs:
        if dim == 2:
            rec["u"] = float(rng.uniform(200, 400))
            rec["v"] = float(rng.uniform(150, 350))
        else:
            rec["x"], rec["y"], rec["z"] = (
                float(x) for x in rng.uniform(-50, 50, 3)
            )
    return recs


class TestDepthFrame:
    def test_shape_and_counts(self):
        depth = np.zeros((4, 6))
        depth[1, 2] = 800.0
        frame = DepthFrame(depth, KINECT)
        assert frame.width == 6
        assert frame.height == 4
        assert frame.num_valid == 1

    def test_rejects_negative(self):
        with pytest.raises(DimensionMismatch):
            DepthFrame(np.full((2, 2), -1.0), KINECT)

    def test_rejects_nan(self):
        depth = np.zeros((2, 2))
        depth[0, 0] = np.nan
        with pytest.raises(DimensionMismatch):
            DepthFrame(depth, KINECT)

    def test_project_inverts_backproject(self):
        depth = np.full((10, 10), 900.0)
        frame = DepthFrame(depth, Intrinsics(500, 480, 4.5, 5.5))
        us, vs = np.meshgrid(np.arange(10), np.arange(10), indexing="xy")
        pts = frame.backproject_pixels(us.ravel(), vs.ravel())
        uv = frame.project_points(pts)
        np.testing.assert_allclose(uv[:, 0], us.ravel(), atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], vs.ravel(), atol=1e-6)


class TestDepthIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        depth = rng.uniform(500, 1500, size=(480, 640))
        depth[rng.random((480, 640)) < 0.05] = 0.0
        depth = np.round(depth * 10) / 10  # representable in tenths of mm
        path = write_frame(tmp_path, depth)
        frame = load_depth(path)
        assert frame.width == 640
        assert frame.height == 480
        np.testing.assert_allclose(frame.depth, depth, atol=1e-9)
        assert frame.intrinsics.fx == KINECT.fx

    def test_missing_file(self, tmp_path):
        with pytest.raises(UnreadableFile):
            load_depth(tmp_path / "absent.pgm")

    def test_missing_sidecar(self, tmp_path):
        path = write_frame(tmp_path, np.full((4, 4), 1000.0))
        path.with_suffix(".json").unlink()
        with pytest.raises(MissingIntrinsics):
            load_depth(path)

    def test_incomplete_sidecar(self, tmp_path):
        path = write_frame(tmp_path, np.full((4, 4), 1000.0))
        path.with_suffix(".json").write_text(json.dumps({"fx": 500.0}))
        with pytest.raises(MissingIntrinsics):
            load_depth(path)

    def test_payload_length_mismatch(self, tmp_path):
        path = write_frame(tmp_path, np.full((4, 4), 1000.0))
        data = path.read_bytes()
        path.write_bytes(data[:-2])
        with pytest.raises(DimensionMismatch):
            load_depth(path)

    def test_not_a_pgm(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        path.with_suffix(".json").write_text(json.dumps(KINECT.as_dict()))
        with pytest.raises(UnreadableFile):
            load_depth(path)

    def test_eight_bit_rejected(self, tmp_path):
        path = tmp_path / "eight.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        path.with_suffix(".json").write_text(json.dumps(KINECT.as_dict()))
        with pytest.raises(UnreadableFile):
            load_depth(path)

    def test_comment_in_header(self, tmp_path):
        payload = np.full(4, 10000, dtype="<u2").tobytes()
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n65535\n" + payload)
        path.with_suffix(".json").write_text(json.dumps(KINECT.as_dict()))
        frame = load_depth(path)
        np.testing.assert_allclose(frame.depth, 1000.0)

    def test_out_of_range_zeroed(self, tmp_path):
        depth = np.array([[50.0, 1000.0], [6000.0, 99.9]])
        path = write_frame(tmp_path, depth)
        frame = load_depth(path)
        np.testing.assert_allclose(frame.depth, [[0, 1000], [0, 0]])

    def test_all_zero_frame_valid(self, tmp_path):
        path = write_frame(tmp_path, np.zeros((8, 8)))
        frame = load_depth(path)
        assert frame.num_valid == 0


class TestLandmarkIO:
    def test_full_set_loads(self, tmp_path):
        path = tmp_path / "lm.json"
        path.write_text(json.dumps(full_landmark_records()))
        lm = load_landmarks(path)
        assert len(lm) == 83
        assert int(lm.silhouette_mask().sum()) == 19
        assert int(lm.internal_mask().sum()) == 64
        assert lm.has("sellion") and lm.has("chin_tip")
        assert not lm.is_3d

    def test_3d_records(self, tmp_path):
        path = tmp_path / "lm3.json"
        path.write_text(json.dumps(full_landmark_records(dim=3)))
        lm = load_landmarks(path)
        assert lm.is_3d

    def test_wrong_count(self, tmp_path):
        recs = full_landmark_records()[:-1]
        path = tmp_path / "lm82.json"
        path.write_text(json.dumps(recs))
        with pytest.raises(WrongCount):
            load_landmarks(path)

    def test_missing_anchor(self, tmp_path):
        recs = full_landmark_records()
        for rec in recs:
            if rec["name"] == "sellion":
                rec["name"] = "not_sellion"
        path = tmp_path / "lmna.json"
        path.write_text(json.dumps(recs))
        with pytest.raises(MissingAnchor):
            load_landmarks(path)

    def test_duplicate_name(self):
        recs = full_landmark_records()
        recs[1]["name"] = recs[0]["name"]
        with pytest.raises(DuplicateName):
            landmarks_from_records(recs)

    def test_save_round_trip(self, tmp_path):
        lm = landmarks_from_records(full_landmark_records(dim=3))
        path = tmp_path / "out.json"
        save_landmarks(lm, path)
        back = load_landmarks(path)
        assert back.names == lm.names
        np.testing.assert_allclose(back.points, lm.points)

    def test_common_valid_order(self):
        lm = landmarks_from_records(full_landmark_records())
        other = LandmarkSet(lm.names, lm.points, lm.groups, lm.valid.copy())
        other.valid[5] = False
        common = lm.common_valid(other)
        assert len(common) == 82
        assert lm.names[5] not in common


class TestBackproject:
    def test_constant_block_oracle(self):
        # 3x3 block of depth 1000 with fx=fy=500, cx=cy=0:
        # pixel (u,v) maps to (2u, 2v, 1000)
        depth = np.zeros((4, 4))
        depth[0:3, 0:3] = 1000.0
        frame = DepthFrame(depth, Intrinsics(500, 500, 0, 0))
        mesh, vmap = backproject(frame, (0, 0, 3, 3))
        assert mesh.num_vertices == 9
        assert mesh.num_triangles == 8
        np.testing.assert_allclose(mesh.vertices[:, 2], 1000.0)
        for v in range(3):
            for u in range(3):
                vid = vmap[v, u]
                assert vid >= 0
                np.testing.assert_allclose(
                    mesh.vertices[vid], [2 * u, 2 * v, 1000.0]
                )

    def test_principal_point(self):
        depth = np.zeros((8, 8))
        depth[4, 3] = 1234.0
        depth[4, 4] = 1234.0
        depth[5, 3] = 1234.0
        frame = DepthFrame(depth, Intrinsics(500, 500, 3.0, 4.0))
        mesh, vmap = backproject(frame, (0, 0, 8, 8))
        vid = vmap[4, 3]
        np.testing.assert_allclose(mesh.vertices[vid], [0, 0, 1234.0])

    def test_depth_step_not_spanned(self):
        # two 2x4 bands separated by a 200 mm step
        depth = np.zeros((4, 4))
        depth[0:2, :] = 1000.0
        depth[2:4, :] = 1200.0
        frame = DepthFrame(depth, Intrinsics(500, 500, 0, 0))
        mesh, vmap = backproject(frame, (0, 0, 4, 4))
        # no triangle may contain vertices from both bands
        band = mesh.vertices[:, 2]
        for tri in mesh.triangles:
            zs = band[tri]
            assert zs.max() - zs.min() < 200.0

    def test_reprojection_recovers_pixels(self):
        rng = np.random.default_rng(9)
        depth = np.round(rng.uniform(600, 700, size=(20, 20)) * 10) / 10
        frame = DepthFrame(depth, KINECT)
        mesh, vmap = backproject(frame, (0, 0, 20, 20))
        vs, us = np.nonzero(vmap >= 0)
        order = vmap[vs, us]
        uv = frame.project_points(mesh.vertices[order])
        np.testing.assert_allclose(uv[:, 0], us, atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], vs, atol=1e-6)

    def test_depth_scaling_scales_vertices(self):
        rng = np.random.default_rng(12)
        depth = rng.uniform(500, 505, size=(10, 10))
        f1 = DepthFrame(depth, KINECT)
        f2 = DepthFrame(depth * 2.0, KINECT)
        m1, _ = backproject(f1, (0, 0, 10, 10), max_edge_mm=1e9)
        m2, _ = backproject(f2, (0, 0, 10, 10), max_edge_mm=1e9)
        np.testing.assert_array_equal(m2.vertices, m1.vertices * 2.0)

    def test_mapping_is_bijection(self):
        rng = np.random.default_rng(3)
        depth = rng.uniform(500, 520, size=(12, 12))
        depth[rng.random((12, 12)) < 0.3] = 0.0
        frame = DepthFrame(depth, KINECT)
        mesh, vmap = backproject(frame, (2, 2, 11, 11))
        ids = vmap[vmap >= 0]
        assert len(ids) == mesh.num_vertices
        assert len(np.unique(ids)) == mesh.num_vertices
        # vertices only come from inside the rect
        vs, us = np.nonzero(vmap >= 0)
        assert us.min() >= 2 and us.max() < 11
        assert vs.min() >= 2 and vs.max() < 11

    def test_normals_face_sensor(self):
        depth = np.full((6, 6), 800.0)
        frame = DepthFrame(depth, KINECT)
        mesh, _ = backproject(frame, (0, 0, 6, 6))
        np.testing.assert_allclose(
            mesh.normals, np.tile([0, 0, -1.0], (mesh.num_vertices, 1)), atol=1e-12
        )

    def test_empty_region(self):
        frame = DepthFrame(np.zeros((6, 6)), KINECT)
        with pytest.raises(EmptyRegion):
            backproject(frame, (0, 0, 6, 6))

    def test_rect_out_of_bounds(self):
        frame = DepthFrame(np.full((6, 6), 500.0), KINECT)
        with pytest.raises(EmptyRegion):
            backproject(frame, (0, 0, 7, 6))

    def test_all_isolated_pixels(self):
        # valid pixels with no grid adjacency: no triangles possible
        depth = np.zeros((6, 6))
        depth[0, 0] = depth[0, 2] = depth[0, 4] = 500.0
        depth[2, 0] = depth[2, 2] = 500.0
        frame = DepthFrame(depth, KINECT)
        with pytest.raises(DegenerateGeometry):
            backproject(frame, (0, 0, 6, 6))


class TestLiftLandmarks:
    def make_frame(self):
        depth = np.full((40, 40), 1000.0)
        return DepthFrame(depth, Intrinsics(500, 500, 20, 20))

    def make_landmarks(self, coords):
        n = len(coords)
        names = [f"internal_{i:02d}" for i in range(n)]
        groups = ["internal"] * n
        return LandmarkSet(names, np.asarray(coords, float), groups)

    def test_on_valid_pixel_matches_backproject(self):
        frame = self.make_frame()
        lm = self.make_landmarks([[10, 12]] + [[5 + i, 5] for i in range(6)])
        lifted = lift_landmarks(frame, lm)
        expected = frame.backproject_pixels([10], [12])[0]
        np.testing.assert_allclose(lifted.points[0], expected)
        assert lifted.is_3d
        assert lifted.valid.all()

    def test_hole_uses_nearest_neighbor(self):
        depth = np.full((40, 40), 1000.0)
        depth[12, 10] = 0.0
        frame = DepthFrame(depth, Intrinsics(500, 500, 20, 20))
        lm = self.make_landmarks([[10, 12]] + [[5 + i, 5] for i in range(6)])
        lifted = lift_landmarks(frame, lm)
        # nearest valid pixels are the 4-neighbors at distance 1; tie
        # breaks toward smaller v then smaller u, so (10, 11)
        expected = frame.backproject_pixels([10], [11])[0]
        np.testing.assert_allclose(lifted.points[0], expected)

    def test_isolated_hole_flagged_absent(self):
        depth = np.full((40, 40), 1000.0)
        depth[8:17, 6:15] = 0.0  # 4-pixel margin around (10, 12)
        frame = DepthFrame(depth, Intrinsics(500, 500, 20, 20))
        lm = self.make_landmarks([[10, 12]] + [[25 + i, 25] for i in range(6)])
        lifted = lift_landmarks(frame, lm)
        assert not lifted.valid[0]
        assert lifted.valid[1:].all()

    def test_no_depth_raises(self):
        frame = DepthFrame(np.zeros((40, 40)), Intrinsics(500, 500, 20, 20))
        lm = self.make_landmarks([[10 + i, 10] for i in range(7)])
        with pytest.raises(TooFewValid):
            lift_landmarks(frame, lm)


class TestFaceRect:
    def test_inflated_bbox(self):
        lm = LandmarkSet(
            ["a", "b"],
            np.array([[100.0, 100.0], [200.0, 200.0]]),
            ["internal", "internal"],
        )
        frame = DepthFrame(np.zeros((480, 640)), KINECT)
        u0, v0, u1, v1 = derive_face_rect(lm, frame, inflate=0.15)
        assert u0 == 85 and v0 == 85
        assert u1 == 216 and v1 == 216

    def test_clamped_to_frame(self):
        lm = LandmarkSet(
            ["a", "b"],
            np.array([[5.0, 5.0], [635.0, 475.0]]),
            ["internal", "internal"],
        )
        frame = DepthFrame(np.zeros((480, 640)), KINECT)
        u0, v0, u1, v1 = derive_face_rect(lm, frame)
        assert u0 >= 0 and v0 >= 0
        assert u1 <= 640 and v1 <= 480
