import numpy as np
import pytest

from cblkit.cloud import (CloudFormatError, NeighborhoodIndex, PointCloud,
                          build_hierarchy, build_index, grid_subsample,
                          read_cloud, write_cloud)
from conftest import random_cloud
from oracles import brute_boundary, transitive_members


def one_hot_stage0(cloud):
    oh = np.zeros((cloud.num_points, cloud.num_classes))
    oh[np.arange(cloud.num_points), cloud.gt_labels] = 1.0
    return oh


class TestPointCloud:
    def test_basic_construction(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 1])
        assert cloud.num_points == 2
        assert cloud.num_classes == 2
        assert cloud.pred_labels is None

    def test_explicit_num_classes(self):
        cloud = PointCloud([[0, 0, 0]], [0], num_classes=5)
        assert cloud.num_classes == 5

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0], [1, 0, 0]], [0])

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], [2], num_classes=2)
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], [-1], num_classes=2)

    def test_non_finite_positions_rejected(self):
        with pytest.raises(ValueError):
            PointCloud([[np.nan, 0, 0]], [0])
        with pytest.raises(ValueError):
            PointCloud([[np.inf, 0, 0]], [0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)), [])

    def test_arrays_read_only(self):
        cloud = PointCloud([[0, 0, 0]], [0])
        with pytest.raises(ValueError):
            cloud.positions[0, 0] = 1.0

    def test_with_pred_labels(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 1])
        tagged = cloud.with_pred_labels([1, 1])
        assert tagged.pred_labels.tolist() == [1, 1]
        assert cloud.pred_labels is None


class TestNeighborhoodIndex:
    def test_single_point_has_empty_neighborhood(self):
        index = build_index([[0.0, 0.0, 0.0]])
        assert index.radius_query(0, 1.0).size == 0

    def test_two_close_points_are_mutual_neighbors(self):
        index = build_index([[0, 0, 0], [0.05, 0, 0]])
        assert index.radius_query(0, 0.1).tolist() == [1]
        assert index.radius_query(1, 0.1).tolist() == [0]

    def test_radius_is_inclusive(self):
        index = build_index([[0, 0, 0], [0.1, 0, 0]])
        assert index.radius_query(0, 0.1).tolist() == [1]

    def test_matches_brute_force(self, rng):
        cloud = random_cloud(rng, num_points=500, extent=1.0)
        index = build_index(cloud.positions)
        for radius in (0.05, 0.1, 0.2):
            for i in rng.integers(0, 500, size=40):
                got = index.radius_query(int(i), radius)
                d = np.linalg.norm(cloud.positions - cloud.positions[i], axis=1)
                want = np.where((d <= radius) & (np.arange(500) != i))[0]
                assert got.tolist() == want.tolist()

    def test_query_all_agrees_with_single_queries(self, rng):
        cloud = random_cloud(rng, num_points=120)
        index = build_index(cloud.positions)
        neighbors, offsets = index.radius_query_all(0.15)
        for i in range(120):
            row = neighbors[offsets[i]:offsets[i + 1]]
            assert row.tolist() == index.radius_query(i, 0.15).tolist()

    def test_symmetry(self, rng):
        cloud = random_cloud(rng, num_points=80)
        index = build_index(cloud.positions)
        for i in range(80):
            for j in index.radius_query(i, 0.2):
                assert i in index.radius_query(int(j), 0.2)

    def test_out_of_range_index(self):
        index = build_index([[0, 0, 0]])
        with pytest.raises(IndexError):
            index.radius_query(1, 0.1)

    def test_duplicate_positions_keep_distinct_indices(self):
        index = build_index([[0, 0, 0], [0, 0, 0], [1, 1, 1]])
        assert index.radius_query(0, 0.0).tolist() == [1]
        assert index.radius_query(1, 0.0).tolist() == [0]


def stage0(cloud, radius=0.1):
    return build_hierarchy(cloud, base_cell=1e9, base_radius=radius, num_stages=1).stage(0)


class TestGridSubsample:
    def test_three_points_one_cell(self):
        cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [0.3, 0.1, 0.1]],
                           [0, 0, 1], num_classes=2)
        pooled = grid_subsample(stage0(cloud), cell_size=1.0)
        assert pooled.num_points == 1
        np.testing.assert_allclose(pooled.positions[0], [0.2, 0.1, 0.1])
        np.testing.assert_allclose(pooled.label_dists[0], [2 / 3, 1 / 3])
        assert pooled.weights.tolist() == [3.0]

    def test_singleton_cells_preserve_points(self):
        pos = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]])
        cloud = PointCloud(pos, [0, 1, 2])
        pooled = grid_subsample(stage0(cloud), cell_size=1.0)
        assert pooled.num_points == 3
        np.testing.assert_allclose(pooled.positions, pos)
        np.testing.assert_allclose(pooled.label_dists, np.eye(3))

    def test_square_corners_pool_to_center(self):
        pos = np.array([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0],
                        [0.0, 0.4, 0.0], [0.4, 0.4, 0.0]])
        cloud = PointCloud(pos, [0, 0, 1, 1])
        pooled = grid_subsample(stage0(cloud), cell_size=0.5)
        assert pooled.num_points == 1
        np.testing.assert_allclose(pooled.positions[0], [0.2, 0.2, 0.0])
        np.testing.assert_allclose(pooled.label_dists[0], [0.5, 0.5])

    def test_cells_are_half_open(self):
        # x = 1.0 belongs to cell [1, 2), not [0, 1)
        cloud = PointCloud([[0.5, 0, 0], [1.0, 0, 0]], [0, 1])
        pooled = grid_subsample(stage0(cloud), cell_size=1.0)
        assert pooled.num_points == 2

    def test_negative_coordinates(self):
        cloud = PointCloud([[-0.5, 0, 0], [0.5, 0, 0]], [0, 1])
        pooled = grid_subsample(stage0(cloud), cell_size=1.0)
        assert pooled.num_points == 2

    def test_pooling_map_is_partition(self, rng):
        cloud = random_cloud(rng, num_points=300, with_pred=False)
        pooled = grid_subsample(stage0(cloud), cell_size=0.2)
        seen = np.zeros(300, dtype=int)
        for g in range(pooled.num_points):
            members = pooled.group(g)
            seen[members] += 1
            assert (pooled.parent_to_group[members] == g).all()
        assert (seen == 1).all()

    def test_bad_cell_size(self):
        cloud = PointCloud([[0, 0, 0]], [0])
        with pytest.raises(ValueError):
            grid_subsample(stage0(cloud), cell_size=0.0)


class TestBuildHierarchy:
    def test_single_stage_is_input(self, rng):
        cloud = random_cloud(rng, num_points=20, with_pred=False)
        hier = build_hierarchy(cloud, base_cell=0.2, base_radius=0.1, num_stages=1)
        assert hier.num_stages == 1
        np.testing.assert_array_equal(hier.stage(0).positions, cloud.positions)
        np.testing.assert_array_equal(hier.stage(0).label_dists, one_hot_stage0(cloud))
        assert hier.stage(0).group_offsets is None

    def test_nine_collinear_points(self):
        x = np.array([0.1, 0.2, 0.3, 1.1, 1.2, 1.3, 2.1, 2.2, 2.3])
        pos = np.stack([x, np.full(9, 0.5), np.full(9, 0.5)], axis=1)
        cloud = PointCloud(pos, [0, 0, 0, 0, 0, 1, 1, 1, 1], num_classes=2)
        hier = build_hierarchy(cloud, base_cell=1.0, base_radius=0.6, num_stages=2)
        assert hier.stage(1).num_points == 3
        np.testing.assert_allclose(hier.stage(1).label_dists,
                                   [[1, 0], [2 / 3, 1 / 3], [0, 1]])
        np.testing.assert_allclose(hier.stage(1).positions[:, 0], [0.2, 1.2, 2.2])

    def test_distributions_equal_transitive_histograms(self, rng):
        cloud = random_cloud(rng, num_points=300, num_classes=4, with_pred=False)
        hier = build_hierarchy(cloud, base_cell=0.15, base_radius=0.1, num_stages=3)
        for n in range(3):
            members = transitive_members(hier, n)
            rec = hier.stage(n)
            for i in range(rec.num_points):
                hist = np.bincount(cloud.gt_labels[members[i]], minlength=4)
                np.testing.assert_allclose(rec.label_dists[i], hist / hist.sum(),
                                           atol=1e-12)
                assert rec.weights[i] == len(members[i])

    def test_size_weighted_conservation(self, rng):
        for trial in range(5):
            cloud = random_cloud(rng, num_points=250, num_classes=3, with_pred=False)
            hier = build_hierarchy(cloud, base_cell=0.12, base_radius=0.1, num_stages=4)
            global_hist = np.bincount(cloud.gt_labels, minlength=3) / 250
            for n in range(hier.num_stages):
                rec = hier.stage(n)
                pooled = (rec.label_dists * rec.weights[:, None]).sum(axis=0)
                pooled /= rec.weights.sum()
                np.testing.assert_allclose(pooled, global_hist, atol=1e-9)

    def test_stage_sizes_strictly_decrease(self, rng):
        cloud = random_cloud(rng, num_points=400, with_pred=False)
        hier = build_hierarchy(cloud, base_cell=0.15, base_radius=0.1, num_stages=3)
        sizes = [hier.stage(n).num_points for n in range(3)]
        assert sizes[0] > sizes[1] > sizes[2]

    def test_radius_schedule_doubles(self):
        cloud = PointCloud([[0, 0, 0], [2, 2, 2]], [0, 1])
        hier = build_hierarchy(cloud, base_cell=0.1, base_radius=0.1, num_stages=3)
        assert hier.stage_radius(0) == pytest.approx(0.1)
        assert hier.stage_radius(1) == pytest.approx(0.2)
        assert hier.stage_radius(2) == pytest.approx(0.4)
        assert hier.stage(2).radius == pytest.approx(0.4)

    def test_single_point_cloud_runs(self):
        cloud = PointCloud([[0.3, 0.3, 0.3]], [0], num_classes=2)
        hier = build_hierarchy(cloud, base_cell=0.1, base_radius=0.1, num_stages=3)
        assert [hier.stage(n).num_points for n in range(3)] == [1, 1, 1]

    def test_deterministic(self, rng):
        cloud = random_cloud(rng, num_points=150, with_pred=False)
        a = build_hierarchy(cloud, base_cell=0.1, base_radius=0.1, num_stages=3)
        b = build_hierarchy(cloud, base_cell=0.1, base_radius=0.1, num_stages=3)
        for n in range(3):
            assert a.stage(n).positions.tobytes() == b.stage(n).positions.tobytes()
            assert a.stage(n).label_dists.tobytes() == b.stage(n).label_dists.tobytes()

    def test_boundary_oracle_on_stage0(self, rng):
        # stage 0 + index must reproduce the O(N^2) definition exactly
        cloud = random_cloud(rng, num_points=200, with_pred=False)
        index = build_index(cloud.positions)
        want = brute_boundary(cloud.positions, cloud.gt_labels, 0.15)
        got = [i for i in range(200)
               if any(cloud.gt_labels[j] != cloud.gt_labels[i]
                      for j in index.radius_query(i, 0.15))]
        assert got == want.tolist()


class TestCloudIO:
    def test_roundtrip_with_pred(self, tmp_path, rng):
        cloud = random_cloud(rng, num_points=40, num_classes=5)
        path = tmp_path / "scene.txt"
        write_cloud(path, cloud)
        back = read_cloud(path)
        np.testing.assert_array_equal(back.positions, cloud.positions)
        np.testing.assert_array_equal(back.gt_labels, cloud.gt_labels)
        np.testing.assert_array_equal(back.pred_labels, cloud.pred_labels)
        assert back.num_classes == 5

    def test_roundtrip_without_pred(self, tmp_path, rng):
        cloud = random_cloud(rng, num_points=10, with_pred=False)
        path = tmp_path / "scene.txt"
        write_cloud(path, cloud)
        back = read_cloud(path)
        assert back.pred_labels is None

    def test_classes_default_is_max_plus_one(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("0 0 0 0\n1 0 0 3\n")
        assert read_cloud(path).num_classes == 4

    def test_classes_header_wins(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("# classes 7\n0 0 0 0\n1 0 0 3\n")
        assert read_cloud(path).num_classes == 7

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("# a comment\n\n0 0 0 0\n# another\n1 0 0 1\n")
        assert read_cloud(path).num_points == 2

    def test_bad_column_count_reports_line(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("0 0 0 0\n1 0 0\n")
        with pytest.raises(CloudFormatError) as err:
            read_cloud(path)
        assert err.value.line == 2

    def test_non_numeric_reports_line(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("0 0 0 0\n0 0 zero 1\n")
        with pytest.raises(CloudFormatError) as err:
            read_cloud(path)
        assert err.value.line == 2

    def test_mixed_pred_columns_rejected(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("0 0 0 0 1\n1 0 0 1\n")
        with pytest.raises(CloudFormatError):
            read_cloud(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("# classes 2\n")
        with pytest.raises(CloudFormatError):
            read_cloud(path)
