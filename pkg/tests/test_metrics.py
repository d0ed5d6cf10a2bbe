import json
import math

import numpy as np
import pytest

from cblkit.cloud import PointCloud, build_index, read_cloud
from cblkit.metrics import (BoundarySet, boundary_iou, extract_boundary,
                            full_report, iou_counts, miou_on, report_counts)
from conftest import FIXTURES, random_cloud
from oracles import brute_boundary, straight_line_report, subset_iou


def boundary_of(cloud, radius, which="gt"):
    labels = cloud.gt_labels if which == "gt" else cloud.pred_labels
    return extract_boundary(labels, build_index(cloud.positions), radius, source=which)


class TestExtractBoundary:
    def test_uniform_labels_give_empty_boundary(self, rng):
        cloud = random_cloud(rng, num_points=50, num_classes=1, with_pred=False)
        assert boundary_of(cloud, 0.5).count == 0

    def test_two_close_points_with_different_labels(self):
        cloud = PointCloud([[0, 0, 0], [0.05, 0, 0]], [0, 1])
        bset = boundary_of(cloud, 0.1)
        assert bset.indices.tolist() == [0, 1]

    def test_far_points_are_not_boundary(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 1])
        assert boundary_of(cloud, 0.1).count == 0

    def test_matches_brute_force(self, rng):
        for trial in range(5):
            cloud = random_cloud(rng, num_points=200, num_classes=3, with_pred=False)
            for radius in (0.05, 0.15):
                got = boundary_of(cloud, radius)
                want = brute_boundary(cloud.positions, cloud.gt_labels, radius)
                assert got.indices.tolist() == want.tolist()

    def test_invariant_under_class_relabeling(self, rng):
        cloud = random_cloud(rng, num_points=150, num_classes=4, with_pred=False)
        perm = np.array([2, 3, 1, 0])
        relabeled = PointCloud(cloud.positions, perm[cloud.gt_labels], num_classes=4)
        a = boundary_of(cloud, 0.12).indices
        b = boundary_of(relabeled, 0.12).indices
        assert a.tolist() == b.tolist()

    def test_label_length_mismatch(self):
        index = build_index([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(ValueError):
            extract_boundary([0], index, 0.1)


class TestMiouOn:
    def test_perfect_prediction(self):
        gt = [0, 1, 2, 0, 1]
        mean, per_class = miou_on(np.arange(5), gt, gt, 3)
        assert mean == 1.0
        np.testing.assert_array_equal(per_class, [1.0, 1.0, 1.0])

    def test_worked_example(self):
        # gt (0,0,1,1) vs pred (0,1,1,1): IoU_0 = 1/2, IoU_1 = 2/3
        mean, per_class = miou_on(np.arange(4), [0, 0, 1, 1], [0, 1, 1, 1], 2)
        np.testing.assert_allclose(per_class, [0.5, 2 / 3])
        assert mean == pytest.approx(7 / 12)

    def test_empty_subset_is_undefined(self):
        mean, per_class = miou_on(np.array([], dtype=int), [0, 1], [0, 1], 2)
        assert math.isnan(mean)
        assert np.isnan(per_class).all()

    def test_absent_class_excluded_from_mean(self):
        mean, per_class = miou_on(np.arange(2), [0, 0], [0, 0], 3)
        assert mean == 1.0
        assert np.isnan(per_class[1]) and np.isnan(per_class[2])

    def test_matches_loop_oracle(self, rng):
        cloud = random_cloud(rng, num_points=120, num_classes=4)
        subset = rng.choice(120, size=60, replace=False)
        want_mean, want_per = subset_iou(subset.tolist(), cloud.gt_labels,
                                         cloud.pred_labels, 4)
        mean, per_class = miou_on(subset, cloud.gt_labels, cloud.pred_labels, 4)
        assert mean == pytest.approx(want_mean, abs=1e-12)
        np.testing.assert_allclose(per_class, want_per, atol=1e-12)


def bset(indices, n=10, stage=0, source="gt"):
    return BoundarySet(stage=stage, source=source,
                       indices=np.asarray(indices, dtype=np.int64), num_points=n)


class TestBoundaryIou:
    def test_identical_sets(self):
        assert boundary_iou(bset([1, 2, 3]), bset([1, 2, 3], source="pred")) == 1.0

    def test_disjoint_sets(self):
        assert boundary_iou(bset([0, 1]), bset([2, 3], source="pred")) == 0.0

    def test_partial_overlap(self):
        # |intersection| = 2, |union| = 5
        assert boundary_iou(bset([0, 1, 2, 3]), bset([2, 3, 4], source="pred")) == 0.4

    def test_both_empty_is_one(self):
        assert boundary_iou(bset([]), bset([], source="pred")) == 1.0

    def test_one_empty_is_zero(self):
        assert boundary_iou(bset([1]), bset([], source="pred")) == 0.0
        assert boundary_iou(bset([]), bset([1], source="pred")) == 0.0

    def test_symmetric(self, rng):
        a = bset(rng.choice(10, 4, replace=False))
        b = bset(rng.choice(10, 6, replace=False), source="pred")
        assert boundary_iou(a, b) == boundary_iou(b, a)

    def test_input_order_irrelevant(self):
        assert boundary_iou(bset([3, 1, 2]), bset([2, 3, 1], source="pred")) == 1.0

    def test_stage_mismatch_rejected(self):
        with pytest.raises(ValueError):
            boundary_iou(bset([1], stage=0), bset([1], stage=1))

    def test_point_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            boundary_iou(bset([1], n=10), bset([1], n=11))


class TestFullReport:
    def test_perfect_prediction(self, rng):
        cloud = random_cloud(rng, num_points=100, num_classes=3, with_pred=False)
        cloud = cloud.with_pred_labels(cloud.gt_labels)
        report = full_report(cloud, 0.1)
        assert report.miou_overall == 1.0
        assert report.b_iou == 1.0
        assert report.oa == 1.0
        assert report.macc == 1.0

    def test_absent_classes_undefined(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 0], [0, 0], num_classes=3)
        report = full_report(cloud, 0.1)
        assert report.per_class_iou[0] == 1.0
        assert np.isnan(report.per_class_iou[1])
        assert np.isnan(report.per_class_iou[2])

    def test_empty_boundary_means_undefined_boundary_miou(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 0], [0, 1], num_classes=2)
        report = full_report(cloud, 0.1)
        assert report.boundary_count == 0
        assert math.isnan(report.miou_boundary)
        # gt boundary empty, pred boundary empty too (pred pair is far apart)
        assert report.b_iou == 1.0

    def test_fixture_matches_straight_line_oracle(self):
        cloud = read_cloud(FIXTURES / "scene50.txt")
        report = full_report(cloud, 0.25)
        want = straight_line_report(cloud.positions, cloud.gt_labels.tolist(),
                                    cloud.pred_labels.tolist(), 2, 0.25)
        assert report.miou_overall == pytest.approx(want["miou_overall"], abs=1e-12)
        assert report.miou_boundary == pytest.approx(want["miou_boundary"], abs=1e-12)
        assert report.miou_inner == pytest.approx(want["miou_inner"], abs=1e-12)
        assert report.b_iou == pytest.approx(want["b_iou"], abs=1e-12)
        assert report.oa == pytest.approx(want["oa"], abs=1e-12)
        assert report.macc == pytest.approx(want["macc"], abs=1e-12)
        assert report.boundary_count == want["boundary_count"]
        assert report.inner_count == want["inner_count"]
        np.testing.assert_allclose(report.per_class_iou, want["per_class_iou"],
                                   atol=1e-12)

    def test_random_clouds_match_oracle(self, rng):
        for trial in range(4):
            cloud = random_cloud(rng, num_points=80, num_classes=3)
            report = full_report(cloud, 0.2)
            want = straight_line_report(cloud.positions, cloud.gt_labels.tolist(),
                                        cloud.pred_labels.tolist(), 3, 0.2)
            for key in ("miou_overall", "miou_boundary", "miou_inner",
                        "b_iou", "oa", "macc"):
                assert getattr(report, key) == pytest.approx(want[key], abs=1e-12)

    def test_boundary_inner_counts_recombine(self, rng):
        # per-class numerators/denominators on B and its complement must sum
        # to the overall tallies exactly
        cloud = random_cloud(rng, num_points=150, num_classes=3)
        counts = report_counts(cloud, 0.15)
        np.testing.assert_array_equal(
            counts.inter_boundary + counts.inter_inner, counts.inter_overall)
        np.testing.assert_array_equal(
            counts.union_boundary + counts.union_inner, counts.union_overall)
        assert counts.boundary_count + counts.inner_count == 150

    def test_merge_pools_counts(self, rng):
        a = random_cloud(rng, num_points=60, num_classes=3)
        b = random_cloud(rng, num_points=90, num_classes=3)
        ca, cb = report_counts(a, 0.15), report_counts(b, 0.15)
        merged = ca.merge(cb).to_report()
        assert merged.boundary_count == ca.boundary_count + cb.boundary_count
        # pooled oa is count-weighted, not a mean of per-scene oas
        want_oa = (ca.correct + cb.correct) / (ca.total + cb.total)
        assert merged.oa == pytest.approx(want_oa, abs=1e-15)

    def test_missing_predictions_rejected(self, rng):
        cloud = random_cloud(rng, num_points=10, with_pred=False)
        with pytest.raises(ValueError):
            full_report(cloud, 0.1)


class TestReportJson:
    def test_keys_and_null_markers(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [0, 0], [0, 0], num_classes=2)
        doc = json.loads(full_report(cloud, 0.1).to_json())
        assert set(doc) == {"miou_overall", "miou_boundary", "miou_inner",
                            "b_iou", "oa", "macc", "per_class_iou",
                            "boundary_count", "inner_count", "radius"}
        assert doc["miou_boundary"] is None  # empty boundary -> undefined
        assert doc["per_class_iou"] == [1.0, None]
        assert doc["boundary_count"] == 0
        assert doc["radius"] == 0.1

    def test_document_is_valid_json(self, rng):
        cloud = random_cloud(rng, num_points=30)
        text = full_report(cloud, 0.2).to_json()
        json.loads(text)
