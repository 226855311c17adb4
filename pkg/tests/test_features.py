"""Descriptor tests: grids, orientation histograms, combined distance."""

import numpy as np
import pytest

from depthface.errors import (
    DegenerateGeometry,
    EmptyPart,
    EmptySection,
    MissingNormals,
    ShapeMismatch,
    UnreadableFile,
    ZeroVector,
)
from depthface.features import (
    AEHistogram,
    DEFAULT_ALPHA,
    PART_NAMES,
    PartDescriptor,
    PartDistance,
    PartMask,
    PseudoLandmarkGrid,
    ae_histogram,
    azimuth_elevation,
    chi_square,
    combined_distance,
    load_descriptors,
    load_part_masks,
    part_descriptor,
    pts_distance,
    sample_pseudo_landmarks,
    save_descriptors,
    save_part_masks,
    validate_part_masks,
)
from depthface.geometry import TriangleMesh, compute_vertex_normals

from helpers import make_grid, make_icosphere, make_tube


TUBE_RADIUS = 50.0
SELLION = np.array([0.0, 40.0, 0.0])
CHIN = np.array([0.0, -40.0, 0.0])


def tube_mesh():
    # rings exactly at the slicing planes for m=3 plus overhang rings
    return make_tube([55.0, 40.0, 20.0, 0.0, -20.0, -40.0, -55.0],
                     segments=128, radius=TUBE_RADIUS)


class TestPartMask:
    def test_construction(self):
        mask = PartMask("nose", [3, 1, 2], [1.0, 0.5, 0.25])
        assert mask.name == "nose"
        assert len(mask) == 3
        np.testing.assert_array_equal(mask.interior(), [3])

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            PartMask("forehead", [0], [1.0])

    def test_duplicate_vertex_rejected(self):
        with pytest.raises(ValueError):
            PartMask("eyes", [1, 1], [1.0, 1.0])

    def test_weight_range_enforced(self):
        with pytest.raises(ValueError):
            PartMask("eyes", [0], [1.5])
        with pytest.raises(ValueError):
            PartMask("eyes", [0], [-0.1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PartMask("eyes", [0, 1], [1.0])

    def test_interiors_must_be_disjoint(self):
        a = PartMask("nose", [0, 1], [1.0, 1.0])
        b = PartMask("mouth", [1, 2], [1.0, 1.0])
        with pytest.raises(ValueError):
            validate_part_masks([a, b])

    def test_shared_feather_band_allowed(self):
        a = PartMask("nose", [0, 1], [1.0, 0.4])
        b = PartMask("mouth", [1, 2], [0.6, 1.0])
        validate_part_masks([a, b])

    def test_json_round_trip(self, tmp_path):
        masks = [
            PartMask("nose", [5, 6, 7], [1.0, 0.5, 0.125]),
            PartMask("eyes", [1, 2], [1.0, 1.0]),
        ]
        path = tmp_path / "masks.json"
        save_part_masks(masks, path)
        loaded = load_part_masks(path)
        by_name = {m.name: m for m in loaded}
        assert set(by_name) == {"nose", "eyes"}
        np.testing.assert_array_equal(by_name["nose"].vertices, [5, 6, 7])
        np.testing.assert_allclose(by_name["nose"].feather, [1.0, 0.5, 0.125])

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(UnreadableFile):
            load_part_masks(tmp_path / "absent.json")

    def test_bad_json_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(UnreadableFile):
            load_part_masks(path)


class TestSamplePseudoLandmarks:
    def test_cylinder_sections_lie_on_radius(self):
        mesh = tube_mesh()
        grid = sample_pseudo_landmarks(mesh, SELLION, CHIN, m=3, n=33)
        assert grid.num_points == 5 * 33
        assert grid.empty_rows == ()
        radial = np.hypot(grid.points[:, 0], grid.points[:, 2])
        np.testing.assert_allclose(radial, TUBE_RADIUS, atol=1e-6)

    def test_rows_ordered_sellion_to_chin(self):
        mesh = tube_mesh()
        grid = sample_pseudo_landmarks(mesh, SELLION, CHIN, m=3, n=33)
        rows = grid.rows()
        np.testing.assert_allclose(
            rows.mean(axis=1)[:, 1], [40.0, 20.0, 0.0, -20.0, -40.0], atol=1e-5
        )

    def test_rows_ordered_by_increasing_x(self):
        grid = sample_pseudo_landmarks(tube_mesh(), SELLION, CHIN, m=3, n=33)
        for row in grid.rows():
            assert np.all(np.diff(row[:, 0]) >= -1e-9)

    def test_front_arc_faces_viewer(self):
        grid = sample_pseudo_landmarks(tube_mesh(), SELLION, CHIN, m=3, n=33)
        # interior samples of each row sit on the +z half of the tube
        interior = grid.rows()[:, 5:-5, :]
        assert np.all(interior[:, :, 2] > 0)

    def test_minimal_grid_hits_arc_extremes(self):
        grid = sample_pseudo_landmarks(tube_mesh(), SELLION, CHIN, m=0, n=2)
        assert grid.num_points == 4
        rows = grid.rows()
        np.testing.assert_allclose(rows[0, 0, 0], -TUBE_RADIUS, atol=1e-6)
        np.testing.assert_allclose(rows[0, 1, 0], TUBE_RADIUS, atol=1e-6)
        np.testing.assert_allclose(rows[:, :, 1].ravel(),
                                   [40.0, 40.0, -40.0, -40.0], atol=1e-6)

    def test_default_grid_size_on_closed_surface(self):
        mesh = make_icosphere(3, radius=80.0)
        grid = sample_pseudo_landmarks(
            mesh, [0.0, 72.0, 0.0], [0.0, -72.0, 0.0], m=33, n=35
        )
        assert grid.num_points == 1225
        assert np.all(np.isfinite(grid.points))
        assert grid.empty_rows == ()

    def test_planes_missing_the_mesh_are_filled(self):
        short = make_tube([10.0, 0.0, -10.0], segments=64, radius=TUBE_RADIUS)
        grid = sample_pseudo_landmarks(short, SELLION, CHIN, m=3, n=17)
        assert grid.empty_rows == (0, 1, 3, 4)
        rows = grid.rows()
        # filled rows are the valid row projected onto their own planes
        np.testing.assert_allclose(rows[0, :, 1], 40.0, atol=1e-9)
        np.testing.assert_allclose(rows[1, :, 1], 20.0, atol=1e-9)
        np.testing.assert_allclose(rows[0, :, [0, 2]], rows[2, :, [0, 2]], atol=1e-9)
        radial = np.hypot(rows[:, :, 0], rows[:, :, 2])
        np.testing.assert_allclose(radial, TUBE_RADIUS, atol=1e-6)

    def test_no_plane_hit_raises(self):
        far = make_grid(2, 2, spacing=1.0, z=0.0)
        far = far.with_vertices(far.vertices + np.array([0.0, 500.0, 0.0]))
        with pytest.raises(EmptySection):
            sample_pseudo_landmarks(far, SELLION, CHIN, m=3, n=5)

    def test_coincident_anchors_raise(self):
        with pytest.raises(DegenerateGeometry):
            sample_pseudo_landmarks(tube_mesh(), SELLION, SELLION, m=3, n=5)

    def test_open_surface_chain_resampled_evenly(self):
        # flat strip in the xy plane: each section is a straight chain,
        # so resampling must produce evenly spaced collinear points
        strip = make_grid(10, 10, spacing=8.0, z=0.0)
        grid = sample_pseudo_landmarks(
            strip, [40.0, 75.0, 0.0], [40.0, 5.0, 0.0], m=1, n=9
        )
        rows = grid.rows()
        for row in rows:
            np.testing.assert_allclose(np.diff(row[:, 0]), 10.0, atol=1e-9)
            np.testing.assert_allclose(row[:, 2], 0.0, atol=1e-12)

    def test_grid_validates_point_count(self):
        with pytest.raises(ShapeMismatch):
            PseudoLandmarkGrid(1, 3, np.zeros((5, 3)))

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            sample_pseudo_landmarks(tube_mesh(), SELLION, CHIN, m=0, n=1)


class TestPtsDistance:
    def grid_from(self, points, m, n):
        return PseudoLandmarkGrid(m, n, points)

    def test_translation_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(1225, 3))
        a = self.grid_from(pts, 33, 35)
        b = self.grid_from(pts + np.array([1.0, 0.0, 0.0]), 33, 35)
        assert pts_distance(a, b) == pytest.approx(1225.0, abs=1e-9)

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(8, 3))
        a = self.grid_from(pts, 0, 4)
        assert pts_distance(a, a) == 0.0
        b = self.grid_from(pts + 1e-8, 0, 4)
        assert pts_distance(a, b) > 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = self.grid_from(rng.normal(size=(6, 3)), 1, 2)
        b = self.grid_from(rng.normal(size=(6, 3)), 1, 2)
        assert pts_distance(a, b) == pts_distance(b, a)

    def test_shape_mismatch_raises(self):
        a = self.grid_from(np.zeros((6, 3)), 1, 2)
        b = self.grid_from(np.zeros((6, 3)), 0, 3)
        with pytest.raises(ShapeMismatch):
            pts_distance(a, b)

    def test_row_swap_changes_distance(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(4, 3))
        a = self.grid_from(pts, 0, 2)
        swapped = pts.reshape(2, 2, 3)[::-1].reshape(4, 3)
        b = self.grid_from(swapped, 0, 2)
        assert pts_distance(a, b) > 0.0
        # identical rows: swapping them changes nothing
        same = np.tile(pts[:2], (2, 1))
        c = self.grid_from(same, 0, 2)
        d = self.grid_from(same.reshape(2, 2, 3)[::-1].reshape(4, 3), 0, 2)
        assert pts_distance(c, d) == 0.0


class TestAzimuthElevation:
    def test_x_axis(self):
        assert azimuth_elevation([1.0, 0.0, 0.0]) == (0.0, 0.0)

    def test_y_axis_is_pole(self):
        theta, phi = azimuth_elevation([0.0, 1.0, 0.0])
        assert theta == 0.0
        assert phi == pytest.approx(np.pi / 2, abs=1e-15)

    def test_z_axis(self):
        theta, phi = azimuth_elevation([0.0, 0.0, 1.0])
        assert theta == pytest.approx(np.pi / 2, abs=1e-15)
        assert phi == 0.0

    def test_diagonal(self):
        v = np.ones(3) / np.sqrt(3)
        theta, phi = azimuth_elevation(v)
        assert theta == pytest.approx(np.pi / 4, abs=1e-12)
        assert phi == pytest.approx(np.arctan(1 / np.sqrt(2)), abs=1e-12)
        assert phi == pytest.approx(0.6154797086703874, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            v = rng.normal(size=3)
            base = azimuth_elevation(v)
            assert azimuth_elevation(v * 4.0) == base
            assert azimuth_elevation(v * 0.03125) == base
            scaled = azimuth_elevation(v * rng.uniform(0.1, 10.0))
            assert scaled == pytest.approx(base, abs=1e-12)

    def test_ranges(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            theta, phi = azimuth_elevation(rng.normal(size=3))
            assert -np.pi <= theta <= np.pi
            assert -np.pi / 2 <= phi <= np.pi / 2

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroVector):
            azimuth_elevation([0.0, 0.0, 0.0])

    def test_non_finite_raises(self):
        with pytest.raises(ZeroVector):
            azimuth_elevation([np.nan, 0.0, 1.0])


def flat_patch(normal=(0.0, 0.0, 1.0)):
    mesh = make_grid(4, 4, spacing=2.0, z=0.0)
    normals = np.tile(np.asarray(normal, dtype=float), (mesh.num_vertices, 1))
    return mesh.with_normals(normals)


def full_mask(mesh, name="nose"):
    n = mesh.num_vertices
    return PartMask(name, np.arange(n), np.ones(n))


class TestAEHistogram:
    def test_uniform_up_normals_fill_one_bin(self):
        # all normals (0, 0, 1): azimuth pi/2 -> bin 24, elevation 0 -> bin 16
        mesh = flat_patch()
        hist = ae_histogram(mesh, full_mask(mesh))
        assert hist.bins[24, 16] == pytest.approx(1.0, abs=1e-12)
        assert hist.bins.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.count_nonzero(hist.bins) == 1

    def test_hemisphere_spreads_mass(self):
        sphere = compute_vertex_normals(make_icosphere(3, radius=1.0))
        front = np.flatnonzero(sphere.vertices[:, 2] > 0)
        mask = PartMask("nose", front, np.ones(len(front)))
        hist = ae_histogram(sphere, mask)
        assert hist.bins.max() <= 0.1
        assert hist.bins.sum() == pytest.approx(1.0, abs=1e-9)

    def test_feather_weight_zero_excludes_vertex(self):
        mesh = flat_patch()
        flipped = mesh.normals.copy()
        flipped[0] = [1.0, 0.0, 0.0]
        mesh = mesh.with_normals(flipped)
        weights = np.ones(mesh.num_vertices)
        weights[0] = 0.0
        hist = ae_histogram(mesh, PartMask("nose", np.arange(mesh.num_vertices), weights))
        # the lone x-facing normal carried weight 0: single bin remains
        assert np.count_nonzero(hist.bins) == 1
        assert hist.bins[24, 16] == pytest.approx(1.0, abs=1e-12)

    def test_translation_invariance_is_exact(self):
        mesh = flat_patch()
        moved = mesh.with_vertices(
            mesh.vertices + np.array([7.0, -3.0, 11.0])
        ).with_normals(mesh.normals)
        a = ae_histogram(mesh, full_mask(mesh))
        b = ae_histogram(moved, full_mask(moved))
        np.testing.assert_array_equal(a.bins, b.bins)

    def test_rotation_moves_the_mass(self):
        mesh = flat_patch()
        rot = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
        rotated = mesh.with_vertices(mesh.vertices @ rot.T).with_normals(
            mesh.normals @ rot.T
        )
        a = ae_histogram(mesh, full_mask(mesh))
        b = ae_histogram(rotated, full_mask(rotated))
        assert np.argmax(a.bins) != np.argmax(b.bins)

    def test_missing_normals_raise(self):
        mesh = make_grid(2, 2)
        with pytest.raises(MissingNormals):
            ae_histogram(mesh, full_mask(mesh))

    def test_empty_mask_raises(self):
        mesh = flat_patch()
        with pytest.raises(EmptyPart):
            ae_histogram(mesh, PartMask("nose", [], []))

    def test_all_zero_normals_raise(self):
        mesh = flat_patch()
        mesh = mesh.with_normals(np.zeros_like(mesh.normals))
        with pytest.raises(EmptyPart):
            ae_histogram(mesh, full_mask(mesh))

    def test_histogram_type_validates(self):
        with pytest.raises(ValueError):
            AEHistogram(np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            AEHistogram(np.array([[-0.5, 1.5]]))
        empty = AEHistogram(np.zeros((4, 4)))
        assert empty.empty


class TestChiSquare:
    def hist(self, values):
        return AEHistogram(np.asarray(values, dtype=float))

    def test_disjoint_supports_hit_bound(self):
        h = self.hist([[0.5, 0.5, 0.0, 0.0]])
        g = self.hist([[0.0, 0.0, 0.25, 0.75]])
        assert chi_square(h, g) == pytest.approx(2.0, abs=1e-12)

    def test_hand_oracle(self):
        h = self.hist([[0.5, 0.5, 0.0]])
        g = self.hist([[1.0, 0.0, 0.0]])
        assert chi_square(h, g) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_zero_iff_equal(self):
        h = self.hist([[0.25, 0.75]])
        assert chi_square(h, h) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a = rng.uniform(size=(4, 4))
            b = rng.uniform(size=(4, 4))
            h = self.hist(a / a.sum())
            g = self.hist(b / b.sum())
            d = chi_square(h, g)
            assert d == chi_square(g, h)
            assert 0.0 <= d <= 2.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatch):
            chi_square(self.hist([[1.0]]), self.hist([[0.5, 0.5]]))


class TestCombinedDistance:
    def descriptor(self, rng, m=1, n=3):
        pts = rng.normal(size=((m + 2) * n, 3))
        bins = rng.uniform(size=(8, 8))
        return PartDescriptor(
            "nose",
            PseudoLandmarkGrid(m, n, pts),
            AEHistogram(bins / bins.sum()),
        )

    def test_exact_combination(self):
        rng = np.random.default_rng(7)
        a = self.descriptor(rng)
        b = self.descriptor(rng)
        for alpha in (0.0, 1.0, 2.0, 4.0, 10.0):
            d = combined_distance(a, b, alpha)
            assert d.combined == d.d_pts + alpha * d.d_normals
        assert combined_distance(a, b, 0.0).combined == pts_distance(a.grid, b.grid)

    def test_ranking_invariant_under_pts_shift(self):
        rng = np.random.default_rng(8)
        d_pts = rng.uniform(0.0, 10.0, size=20)
        d_norm = rng.uniform(0.0, 2.0, size=20)
        combined = d_pts + 4.0 * d_norm
        shifted = (d_pts + 123.0) + 4.0 * d_norm
        np.testing.assert_array_equal(np.argsort(combined), np.argsort(shifted))

    def test_negative_components_rejected(self):
        with pytest.raises(ValueError):
            PartDistance(-1.0, 0.0, 1.0)

    def test_default_alpha_table(self):
        assert DEFAULT_ALPHA == {
            "left_cheek": 1.0,
            "right_cheek": 1.0,
            "nose": 2.0,
            "eyes": 4.0,
            "mouth": 10.0,
        }
        assert set(DEFAULT_ALPHA) == set(PART_NAMES)


class TestDescriptorCache:
    def records(self, rng, m=1, n=3, bins=4, ids=("a", "b")):
        out = {}
        for entry in ids:
            for part in ("nose", "mouth"):
                pts = rng.normal(size=((m + 2) * n, 3))
                h = rng.uniform(size=(bins, bins))
                out[(entry, part)] = PartDescriptor(
                    part,
                    PseudoLandmarkGrid(m, n, pts, empty_rows=(0,)),
                    AEHistogram(h / h.sum()),
                )
        return out

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        records = self.records(rng)
        path = tmp_path / "cache.bin"
        save_descriptors(path, records, m=1, n=3, bins=4)
        loaded, m, n, bins = load_descriptors(path)
        assert (m, n, bins) == (1, 3, 4)
        assert set(loaded) == set(records)
        for key in records:
            np.testing.assert_array_equal(
                loaded[key].grid.points, records[key].grid.points
            )
            np.testing.assert_array_equal(
                loaded[key].histogram.bins, records[key].histogram.bins
            )
            assert loaded[key].grid.empty_rows == (0,)

    def test_rebuild_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(10)
        records = self.records(rng)
        p1 = tmp_path / "one.bin"
        p2 = tmp_path / "two.bin"
        save_descriptors(p1, records, m=1, n=3, bins=4)
        save_descriptors(p2, dict(reversed(list(records.items()))), m=1, n=3, bins=4)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_raises(self, tmp_path):
        rng = np.random.default_rng(11)
        path = tmp_path / "cache.bin"
        save_descriptors(path, self.records(rng), m=1, n=3, bins=4)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(UnreadableFile):
            load_descriptors(path)

    def test_wrong_magic_raises(self, tmp_path):
        path = tmp_path / "cache.bin"
        path.write_bytes(b"NOTADESC" + b"\x00" * 64)
        with pytest.raises(UnreadableFile):
            load_descriptors(path)

    def test_trailing_bytes_raise(self, tmp_path):
        rng = np.random.default_rng(12)
        path = tmp_path / "cache.bin"
        save_descriptors(path, self.records(rng), m=1, n=3, bins=4)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(UnreadableFile):
            load_descriptors(path)

    def test_inconsistent_shape_rejected(self, tmp_path):
        rng = np.random.default_rng(13)
        records = self.records(rng, m=1, n=3)
        with pytest.raises(ShapeMismatch):
            save_descriptors(tmp_path / "c.bin", records, m=2, n=3, bins=4)


class TestPartDescriptor:
    def test_sphere_part_descriptor(self):
        sphere = compute_vertex_normals(make_icosphere(3, radius=80.0))
        front = np.flatnonzero(sphere.vertices[:, 2] > 70.0)
        mask = PartMask("nose", front, np.ones(len(front)))
        desc = part_descriptor(
            sphere, mask, [0.0, 72.0, 0.0], [0.0, -72.0, 0.0], m=5, n=9
        )
        assert desc.part == "nose"
        assert desc.grid.num_points == 7 * 9
        assert desc.histogram.bins.sum() == pytest.approx(1.0, abs=1e-9)
        # the part submesh spans a limited band: far rows are fills
        assert len(desc.grid.empty_rows) > 0
