"""Boundary-aware segmentation quality metrics.

A point is a boundary point of a labeling when some other point within the
boundary radius carries a different label. Quality is then reported overall,
on the ground-truth boundary, on its complement, and as the IoU between the
ground-truth and predicted boundary index sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import NeighborhoodIndex, PointCloud, build_index


@dataclass(frozen=True)
class BoundarySet:
    """Sorted unique boundary indices at one hierarchy stage."""

    stage: int
    source: str  # which labels produced it: "gt" or "pred"
    indices: np.ndarray
    num_points: int

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.num_points):
            raise ValueError("boundary index out of range")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return int(self.indices.size)

    def complement(self) -> np.ndarray:
        mask = np.ones(self.num_points, dtype=bool)
        mask[self.indices] = False
        return np.where(mask)[0]


def extract_boundary(labels, index: NeighborhoodIndex, radius: float,
                     stage: int = 0, source: str = "gt") -> BoundarySet:
    """Indices whose radius neighborhood (self excluded) mixes labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (index.num_points,):
        raise ValueError("labels must match the indexed point count")
    neighbors, offsets = index.radius_query_all(radius)
    counts = np.diff(offsets)
    owners = np.repeat(np.arange(index.num_points), counts)
    differs = labels[neighbors] != labels[owners]
    hit = np.zeros(index.num_points, dtype=bool)
    np.logical_or.at(hit, owners[differs], True)
    return BoundarySet(stage=stage, source=source, indices=np.where(hit)[0],
                       num_points=index.num_points)


def iou_counts(gt, pred, num_classes: int, subset=None):
    """Per-class intersection and union counts, optionally over a subset only.

    Returns:
        inter, union: int64 arrays of length num_classes. IoU_k is
        inter[k] / union[k] where union[k] > 0 and undefined otherwise.
    """
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if subset is not None:
        subset = np.asarray(subset, dtype=np.int64)
        gt = gt[subset]
        pred = pred[subset]
    match = gt == pred
    inter = np.bincount(gt[match], minlength=num_classes)
    gt_count = np.bincount(gt, minlength=num_classes)
    pred_count = np.bincount(pred, minlength=num_classes)
    union = gt_count + pred_count - inter
    return inter.astype(np.int64), union.astype(np.int64)


def _mean_defined(values: np.ndarray) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


def miou_on(subset, gt, pred, num_classes: int):
    """Mean IoU restricted to the given indices.

    Classes without any gt or pred point in the subset are undefined (nan)
    and excluded from the mean; an empty subset leaves every class undefined.

    Returns:
        (mean, per_class) where per_class is float64 with nan markers.
    """
    inter, union = iou_counts(gt, pred, num_classes, subset=subset)
    per_class = np.full(num_classes, np.nan)
    defined = union > 0
    per_class[defined] = inter[defined] / union[defined]
    return _mean_defined(per_class), per_class


def boundary_iou(b_gt: BoundarySet, b_pred: BoundarySet) -> float:
    """IoU of two boundary index sets from the same stage.

    Both empty counts as perfect agreement (1.0); exactly one empty is total
    disagreement (0.0).
    """
    if b_gt.stage != b_pred.stage:
        raise ValueError(f"stage mismatch: {b_gt.stage} vs {b_pred.stage}")
    if b_gt.num_points != b_pred.num_points:
        raise ValueError("boundary sets cover different point counts")
    a, b = set(b_gt.indices.tolist()), set(b_pred.indices.tolist())
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


@dataclass
class ReportCounts:
    """Raw tallies behind a report; merging pools scenes before any division."""

    num_classes: int
    radius: float
    inter_overall: np.ndarray = None
    union_overall: np.ndarray = None
    inter_boundary: np.ndarray = None
    union_boundary: np.ndarray = None
    inter_inner: np.ndarray = None
    union_inner: np.ndarray = None
    b_inter: int = 0
    b_union: int = 0
    correct: int = 0
    total: int = 0
    class_correct: np.ndarray = None
    class_total: np.ndarray = None
    boundary_count: int = 0
    inner_count: int = 0

    def merge(self, other: "ReportCounts") -> "ReportCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        out = ReportCounts(self.num_classes, self.radius)
        for name in ("inter_overall", "union_overall", "inter_boundary",
                     "union_boundary", "inter_inner", "union_inner",
                     "class_correct", "class_total"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        for name in ("b_inter", "b_union", "correct", "total",
                     "boundary_count", "inner_count"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def to_report(self) -> "MetricsReport":
        def mean_iou(inter, union):
            per = np.full(self.num_classes, np.nan)
            ok = union > 0
            per[ok] = inter[ok] / union[ok]
            return _mean_defined(per), per

        miou_overall, per_class = mean_iou(self.inter_overall, self.union_overall)
        miou_boundary, _ = mean_iou(self.inter_boundary, self.union_boundary)
        miou_inner, _ = mean_iou(self.inter_inner, self.union_inner)
        # b_union == 0 only when every pooled gt/pred pair was empty/empty
        b_iou = self.b_inter / self.b_union if self.b_union > 0 else 1.0
        recalls = np.full(self.num_classes, np.nan)
        present = self.class_total > 0
        recalls[present] = self.class_correct[present] / self.class_total[present]
        return MetricsReport(
            miou_overall=miou_overall,
            miou_boundary=miou_boundary,
            miou_inner=miou_inner,
            b_iou=float(b_iou),
            oa=self.correct / self.total,
            macc=_mean_defined(recalls),
            per_class_iou=per_class,
            boundary_count=self.boundary_count,
            inner_count=self.inner_count,
            radius=self.radius,
        )


@dataclass
class MetricsReport:
    """Final metric values; undefined entries are nan and serialize to null."""

    miou_overall: float
    miou_boundary: float
    miou_inner: float
    b_iou: float
    oa: float
    macc: float
    per_class_iou: np.ndarray
    boundary_count: int
    inner_count: int
    radius: float

    def to_json_dict(self) -> dict:
        def scalar(v):
            v = float(v)
            return None if math.isnan(v) else v

        return {
            "miou_overall": scalar(self.miou_overall),
            "miou_boundary": scalar(self.miou_boundary),
            "miou_inner": scalar(self.miou_inner),
            "b_iou": scalar(self.b_iou),
            "oa": scalar(self.oa),
            "macc": scalar(self.macc),
            "per_class_iou": [scalar(v) for v in self.per_class_iou],
            "boundary_count": int(self.boundary_count),
            "inner_count": int(self.inner_count),
            "radius": float(self.radius),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def report_counts(cloud: PointCloud, radius: float,
                  index: Optional[NeighborhoodIndex] = None) -> ReportCounts:
    """Tally everything full_report needs; reusable for pooled aggregation."""
    if cloud.pred_labels is None:
        raise ValueError("cloud carries no predicted labels")
    if index is None:
        index = build_index(cloud.positions)
    gt, pred, k = cloud.gt_labels, cloud.pred_labels, cloud.num_classes
    b_gt = extract_boundary(gt, index, radius, source="gt")
    b_pred = extract_boundary(pred, index, radius, source="pred")
    inner = b_gt.complement()

    counts = ReportCounts(num_classes=k, radius=radius)
    counts.inter_overall, counts.union_overall = iou_counts(gt, pred, k)
    counts.inter_boundary, counts.union_boundary = iou_counts(gt, pred, k, b_gt.indices)
    counts.inter_inner, counts.union_inner = iou_counts(gt, pred, k, inner)
    a, b = set(b_gt.indices.tolist()), set(b_pred.indices.tolist())
    counts.b_inter = len(a & b)
    counts.b_union = len(a | b)
    counts.correct = int((gt == pred).sum())
    counts.total = cloud.num_points
    match = gt == pred
    counts.class_correct = np.bincount(gt[match], minlength=k).astype(np.int64)
    counts.class_total = np.bincount(gt, minlength=k).astype(np.int64)
    counts.boundary_count = b_gt.count
    counts.inner_count = cloud.num_points - b_gt.count
    return counts


def full_report(cloud: PointCloud, radius: float) -> MetricsReport:
    """All metrics of a predicted cloud at the given boundary radius."""
    return report_counts(cloud, radius).to_report()
