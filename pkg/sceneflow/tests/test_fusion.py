"""
Tests for two-scan fusion on a shared voxel set.

Coverage:
- joint_voxelize: union construction and occupancy masks for overlapping, identical, disjoint and empty scans
- vfe_with_virtual: virtual rows exactly zero, occupied rows match the single-scan encoder
- concat_fused: layout, dense scatter equivalence, mismatch errors
- Randomized sweep over 1000 scan pairs on a 32 x 32 grid: equal map sizes, zero virtual rows,
  occupied rows equal to the single-scan encoder, dense scatter equivalence
"""
import numpy as np
from django.test import SimpleTestCase

from sceneflow.core import GridConfig
from sceneflow.exceptions import ContractViolation, StructuralError
from sceneflow.fusion import concat_fused, joint_voxelize, vfe_with_virtual, virtual_point_features
from sceneflow.network import UnetConfig, init_params
from sceneflow.scene_io import make_rng
from sceneflow.sparse_tensor import SparseFeatureMap, is_canonical
from sceneflow.voxelizer import augment_point_features, vfe_forward, voxelize

GRID = GridConfig(range_m=3.2, voxel_size=(0.4, 0.4, 6.0))
GRID32 = GridConfig(range_m=12.8, voxel_size=(0.4, 0.4, 6.0))
SWEEP_PAIRS = 1000

# Three cells along x on the row iy = 4.
A = [-1.4, 0.1, 0.0]
B = [-1.0, 0.1, 0.0]
C = [-0.6, 0.1, 0.0]


def toy_vfe(seed=0):
    return init_params(UnetConfig.toy(), seed, GRID, dtype=np.float64).vfe


def encode(points_t, points_t1, params, grid=GRID):
    points_t = np.asarray(points_t, dtype=float).reshape(-1, 3)
    points_t1 = np.asarray(points_t1, dtype=float).reshape(-1, 3)
    jv = joint_voxelize(points_t, points_t1, grid)
    feats_t = augment_point_features(points_t, jv.assignment_t, grid)
    feats_t1 = augment_point_features(points_t1, jv.assignment_t1, grid)
    return jv, vfe_with_virtual(jv, feats_t, feats_t1, params, grid)


def random_scan(rng, n, half=1.6):
    return np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n), rng.uniform(-2.0, 2.0, n)])


class JointVoxelizeTest(SimpleTestCase):
    """Test the union voxel set and occupancy masks."""

    def test_overlapping_sets(self):
        """Test that {a, b} and {b, c} give union {a, b, c} with the matching masks."""
        jv = joint_voxelize(np.array([A, B]), np.array([B, C]), GRID)
        np.testing.assert_array_equal(jv.union_coords, [[0, 4, 0], [0, 4, 1], [0, 4, 2]])
        np.testing.assert_array_equal(jv.mask_t, [True, True, False])
        np.testing.assert_array_equal(jv.mask_t1, [False, True, True])

    def test_identical_sets(self):
        """Test that identical voxel sets give all-true masks."""
        jv = joint_voxelize(np.array([A, C]), np.array([C, A]), GRID)
        self.assertEqual(jv.union_count, 2)
        self.assertTrue(jv.mask_t.all())
        self.assertTrue(jv.mask_t1.all())

    def test_disjoint_sets(self):
        """Test that disjoint voxel sets give complementary masks."""
        jv = joint_voxelize(np.array([A]), np.array([C]), GRID)
        np.testing.assert_array_equal(jv.mask_t, ~jv.mask_t1)

    def test_one_scan_empty(self):
        """Test that an empty scan contributes nothing to the union."""
        jv = joint_voxelize(np.zeros((0, 3)), np.array([A, B]), GRID)
        self.assertEqual(jv.union_count, 2)
        self.assertFalse(jv.mask_t.any())
        self.assertTrue(jv.mask_t1.all())

    def test_both_scans_empty(self):
        """Test that two empty scans give an empty union."""
        jv = joint_voxelize(np.zeros((0, 3)), np.zeros((0, 3)), GRID)
        self.assertEqual(jv.union_count, 0)

    def test_union_is_canonical_and_indexes_points(self):
        """Test that the union is sorted and every point indexes its own voxel in it."""
        rng = make_rng(1)
        points_t, points_t1 = random_scan(rng, 200), random_scan(rng, 150)
        jv = joint_voxelize(points_t, points_t1, GRID)
        self.assertTrue(is_canonical(jv.union_coords))
        for assignment in (jv.assignment_t, jv.assignment_t1):
            np.testing.assert_array_equal(
                jv.union_coords[assignment.point_to_voxel], assignment.voxel_coord_per_point,
            )
        own_t = voxelize(points_t, GRID)
        self.assertEqual(int(jv.mask_t.sum()), own_t.voxel_count)
        self.assertTrue(np.all(jv.mask_t | jv.mask_t1))

    def test_virtual_point_features(self):
        """Test that a virtual point sits at the centre with zero offset."""
        feats = virtual_point_features([[0, 4, 0]], GRID)
        np.testing.assert_allclose(feats, [[-1.4, 0.2, 0.0, 0.0, 0.0, 0.0, -1.4, 0.2, 0.0]], atol=1e-12)


class VirtualVfeTest(SimpleTestCase):
    """Test encoding both scans onto the union."""

    def test_virtual_rows_are_exactly_zero(self):
        """Test that rows of voxels a scan does not occupy are exactly zero."""
        jv, (e_t, e_t1) = encode([A, B], [B, C], toy_vfe())
        self.assertEqual(e_t.row_count, 3)
        self.assertEqual(e_t1.row_count, 3)
        np.testing.assert_array_equal(e_t.features[2], 0.0)
        np.testing.assert_array_equal(e_t1.features[0], 0.0)

    def test_both_maps_share_the_union_coords(self):
        """Test that both encoded maps are row-aligned on the union."""
        rng = make_rng(2)
        jv, (e_t, e_t1) = encode(random_scan(rng, 100), random_scan(rng, 100), toy_vfe(1))
        self.assertTrue(e_t.same_coords(e_t1))
        np.testing.assert_array_equal(e_t.coords, jv.union_coords)

    def test_occupied_rows_match_single_scan_encoder(self):
        """Test that padding with virtual points leaves real voxel rows unchanged."""
        rng = make_rng(3)
        params = toy_vfe(2)
        points_t, points_t1 = random_scan(rng, 120), random_scan(rng, 90)
        jv, (e_t, e_t1) = encode(points_t, points_t1, params)
        for points, mask, fused in ((points_t, jv.mask_t, e_t), (points_t1, jv.mask_t1, e_t1)):
            own = voxelize(points, GRID)
            alone = vfe_forward(augment_point_features(points, own, GRID), own, params)
            np.testing.assert_array_equal(fused.coords[mask], alone.coords)
            np.testing.assert_allclose(fused.features[mask], alone.features, rtol=1e-12, atol=1e-14)

    def test_empty_scan_gives_zero_map(self):
        """Test that an empty scan encodes to all-zero rows on the other scan's voxels."""
        _, (e_t, e_t1) = encode(np.zeros((0, 3)), [A, B], toy_vfe())
        np.testing.assert_array_equal(e_t.features, 0.0)
        self.assertEqual(e_t.row_count, 2)

    def test_rejects_misaligned_features(self):
        """Test that feature rows must match the kept points of the scan."""
        jv = joint_voxelize(np.array([A, B]), np.array([C]), GRID)
        with self.assertRaises(ContractViolation):
            vfe_with_virtual(jv, np.zeros((1, 9)), np.zeros((1, 9)), toy_vfe(), GRID)


class ConcatFusedTest(SimpleTestCase):
    """Test channel-wise concatenation of the fused maps."""

    def test_layout(self):
        """Test that concatenation places scan t channels before scan t+1 channels."""
        coords = [[0, 0, 0], [0, 1, 1]]
        e_t = SparseFeatureMap(coords, [[1.0, 2.0], [3.0, 4.0]], (1, 4, 4))
        e_t1 = SparseFeatureMap(coords, [[5.0, 6.0], [7.0, 8.0]], (1, 4, 4))
        fused = concat_fused(e_t, e_t1)
        np.testing.assert_array_equal(fused.features, [[1.0, 2.0, 5.0, 6.0], [3.0, 4.0, 7.0, 8.0]])
        np.testing.assert_array_equal(fused.coords, coords)

    def test_matches_dense_scatter(self):
        """Test that concat then densify equals densify then concat."""
        rng = make_rng(4)
        _, (e_t, e_t1) = encode(random_scan(rng, 80), random_scan(rng, 80), toy_vfe(3))
        fused = concat_fused(e_t, e_t1)
        np.testing.assert_array_equal(
            fused.to_dense(), np.concatenate([e_t.to_dense(), e_t1.to_dense()], axis=-1),
        )

    def test_rejects_row_count_mismatch(self):
        """Test that maps of different sizes cannot be fused."""
        e_t = SparseFeatureMap([[0, 0, 0]], [[1.0]], (1, 4, 4))
        e_t1 = SparseFeatureMap([[0, 0, 0], [0, 0, 1]], [[1.0], [2.0]], (1, 4, 4))
        with self.assertRaises(ContractViolation):
            concat_fused(e_t, e_t1)

    def test_rejects_channel_mismatch(self):
        """Test that maps of different widths cannot be fused."""
        e_t = SparseFeatureMap([[0, 0, 0]], [[1.0]], (1, 4, 4))
        e_t1 = SparseFeatureMap([[0, 0, 0]], [[1.0, 2.0]], (1, 4, 4))
        with self.assertRaises(ContractViolation):
            concat_fused(e_t, e_t1)

    def test_rejects_different_coordinates(self):
        """Test that equally sized maps on different voxels raise a structural error."""
        e_t = SparseFeatureMap([[0, 0, 0]], [[1.0]], (1, 4, 4))
        e_t1 = SparseFeatureMap([[0, 0, 1]], [[1.0]], (1, 4, 4))
        with self.assertRaises(StructuralError):
            concat_fused(e_t, e_t1)


class FusionSweepTest(SimpleTestCase):
    """Check the fusion invariants on many random scan pairs."""

    def test_random_pairs(self):
        """Test sizes, virtual rows, single-scan agreement and dense scatter on every pair."""
        rng = make_rng(12)
        params = init_params(UnetConfig.toy(), 4, GRID32, dtype=np.float64).vfe
        for trial in range(SWEEP_PAIRS):
            points_t = random_scan(rng, int(rng.integers(1, 40)), rng.uniform(0.5, 6.4))
            points_t1 = random_scan(rng, int(rng.integers(1, 40)), rng.uniform(0.5, 6.4))
            jv, (e_t, e_t1) = encode(points_t, points_t1, params, GRID32)
            self.assertEqual(e_t.row_count, jv.union_count, trial)
            self.assertEqual(e_t1.row_count, jv.union_count, trial)
            for points, mask, fused in ((points_t, jv.mask_t, e_t), (points_t1, jv.mask_t1, e_t1)):
                np.testing.assert_array_equal(fused.features[~mask], 0.0)
                own = voxelize(points, GRID32)
                alone = vfe_forward(augment_point_features(points, own, GRID32), own, params)
                np.testing.assert_array_equal(fused.coords[mask], alone.coords)
                np.testing.assert_allclose(fused.features[mask], alone.features, rtol=1e-12, atol=1e-14)
            np.testing.assert_array_equal(
                concat_fused(e_t, e_t1).to_dense(), np.concatenate([e_t.to_dense(), e_t1.to_dense()], axis=-1),
            )
