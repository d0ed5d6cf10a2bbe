"""Point cloud container, exact radius neighborhoods, grid pooling and text I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


class CloudFormatError(ValueError):
    """Raised for malformed cloud text files; carries a 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _as_positions(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
    if pos.shape[0] == 0:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    return pos


def _as_labels(labels, n: int, num_classes: int, name: str) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.floor(lab)):
            raise ValueError(f"{name} must be integers")
    lab = lab.astype(np.int64)
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ValueError(f"{name} must lie in [0, {num_classes})")
    return lab


class PointCloud:
    """Positions with per-point ground-truth labels and optional predictions.

    Immutable after construction; arrays are copied in and marked read-only.
    """

    def __init__(self, positions, gt_labels, pred_labels=None, num_classes: Optional[int] = None):
        self.positions = _as_positions(positions)
        n = self.positions.shape[0]
        if num_classes is None:
            num_classes = int(np.max(np.asarray(gt_labels))) + 1
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        self.gt_labels = _as_labels(gt_labels, n, self.num_classes, "gt_labels")
        if pred_labels is None:
            self.pred_labels = None
        else:
            self.pred_labels = _as_labels(pred_labels, n, self.num_classes, "pred_labels")
        for arr in (self.positions, self.gt_labels, self.pred_labels):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    def with_pred_labels(self, pred_labels) -> "PointCloud":
        """New cloud sharing positions/gt but carrying the given predictions."""
        return PointCloud(self.positions, self.gt_labels, pred_labels, self.num_classes)

    def __repr__(self):
        return (f"PointCloud(num_points={self.num_points}, num_classes={self.num_classes}, "
                f"pred={'yes' if self.pred_labels is not None else 'no'})")


def read_cloud(path) -> PointCloud:
    """Parse the whitespace text format: ``x y z gt_label [pred_label]``.

    ``#`` starts a comment. An optional ``# classes K`` header pins the class
    count; otherwise K = max(label) + 1. Rows must agree on whether the
    prediction column is present.
    """
    positions: List[List[float]] = []
    gt: List[int] = []
    pred: List[int] = []
    num_classes = None
    ncols = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                tokens = line[1:].split()
                if len(tokens) == 2 and tokens[0] == "classes":
                    try:
                        num_classes = int(tokens[1])
                    except ValueError:
                        raise CloudFormatError("bad classes header", lineno)
                continue
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise CloudFormatError(f"expected 4 or 5 columns, got {len(parts)}", lineno)
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise CloudFormatError("inconsistent column count", lineno)
            try:
                xyz = [float(p) for p in parts[:3]]
                labels = [int(p) for p in parts[3:]]
            except ValueError:
                raise CloudFormatError(f"could not parse row {parts!r}", lineno)
            if any(not np.isfinite(v) for v in xyz):
                raise CloudFormatError("non-finite coordinate", lineno)
            if any(lab < 0 for lab in labels):
                raise CloudFormatError("negative label", lineno)
            positions.append(xyz)
            gt.append(labels[0])
            if ncols == 5:
                pred.append(labels[1])
    if not positions:
        raise CloudFormatError("file contains no points")
    try:
        return PointCloud(positions, gt, pred if pred else None, num_classes)
    except ValueError as exc:
        raise CloudFormatError(str(exc))


def write_cloud(path, cloud: PointCloud) -> None:
    """Write a cloud in the text format, always emitting the classes header."""
    with open(path, "w") as fh:
        fh.write(f"# classes {cloud.num_classes}\n")
        has_pred = cloud.pred_labels is not None
        for i in range(cloud.num_points):
            x, y, z = (float(v) for v in cloud.positions[i])
            row = f"{x!r} {y!r} {z!r} {cloud.gt_labels[i]}"
            if has_pred:
                row += f" {cloud.pred_labels[i]}"
            fh.write(row + "\n")


class NeighborhoodIndex:
    """Exact Euclidean radius queries over a fixed point set.

    Queries return indices j != i with ||x_j - x_i|| <= r, sorted ascending.
    Backed by a k-d tree; results are exact, not approximate.
    """

    def __init__(self, points):
        self.points = _as_positions(points)
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def radius_query(self, i: int, radius: float) -> np.ndarray:
        if not 0 <= i < self.num_points:
            raise IndexError(f"point index {i} out of range")
        if radius < 0:
            raise ValueError("radius must be non-negative")
        idx = self._tree.query_ball_point(self.points[i], radius)
        out = np.array([j for j in idx if j != i], dtype=np.int64)
        out.sort()
        return out

    def radius_query_all(self, radius: float):
        """All neighborhoods at once, as flat CSR arrays.

        Returns:
            neighbors: int64 array of neighbor indices, rows concatenated.
            offsets: int64 array of length N+1; row i is
                neighbors[offsets[i]:offsets[i+1]], sorted, self excluded.
        """
        if radius < 0:
            raise ValueError("radius must be non-negative")
        lists = self._tree.query_ball_point(self.points, radius, return_sorted=True)
        counts = np.empty(self.num_points, dtype=np.int64)
        rows = []
        for i, lst in enumerate(lists):
            row = np.asarray(lst, dtype=np.int64)
            row = row[row != i]
            rows.append(row)
            counts[i] = row.size
        offsets = np.zeros(self.num_points + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        neighbors = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        return neighbors, offsets

    def radius_query_many(self, indices, radius: float):
        """CSR neighborhoods for a subset of indexed points, self excluded.

        Returns (neighbors, offsets) where the row for indices[k] is
        neighbors[offsets[k]:offsets[k+1]], sorted ascending.
        """
        if radius < 0:
            raise ValueError("radius must be non-negative")
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_points):
            raise IndexError("point index out of range")
        lists = self._tree.query_ball_point(self.points[indices], radius,
                                            return_sorted=True)
        counts = np.empty(indices.size, dtype=np.int64)
        rows = []
        for k, lst in enumerate(lists):
            row = np.asarray(lst, dtype=np.int64)
            row = row[row != indices[k]]
            rows.append(row)
            counts[k] = row.size
        offsets = np.zeros(indices.size + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        neighbors = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        return neighbors, offsets

    def nearest(self, queries) -> np.ndarray:
        """Index of the nearest indexed point for each query position."""
        queries = np.asarray(queries, dtype=np.float64)
        _, idx = self._tree.query(queries)
        return np.atleast_1d(idx).astype(np.int64)


def build_index(points) -> NeighborhoodIndex:
    """Build an exact radius-query index over the given (N, 3) positions."""
    return NeighborhoodIndex(points)


@dataclass
class StageRecord:
    """One resolution level of a sampling hierarchy.

    ``label_dists[i]`` is the class histogram of the input points that were
    transitively pooled into point i, and ``weights[i]`` is how many input
    points that is. ``pooling_map`` describes how the previous stage was
    grouped into this one (None at stage 0): ``member_indices[group_offsets[g]
    : group_offsets[g+1]]`` lists the previous-stage members of group g, and
    ``parent_to_group[j]`` is the group of previous-stage point j.
    """

    positions: np.ndarray
    label_dists: np.ndarray
    weights: np.ndarray
    radius: float
    group_offsets: Optional[np.ndarray] = None
    member_indices: Optional[np.ndarray] = None
    parent_to_group: Optional[np.ndarray] = None

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    def group(self, g: int) -> np.ndarray:
        if self.group_offsets is None:
            raise ValueError("stage 0 has no pooling map")
        return self.member_indices[self.group_offsets[g]:self.group_offsets[g + 1]]


def grid_subsample(prev: StageRecord, cell_size: float, radius: float = 0.0) -> StageRecord:
    """Pool a stage onto a regular grid of half-open cells ``[k*s, (k+1)*s)``.

    Points sharing a cell form one group; the output position is the group
    centroid and the output distribution is the mean of the group's rows
    weighted by how many input points each row represents. Deterministic:
    groups are ordered by cell key, members keep ascending index order.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    keys = np.floor(prev.positions / cell_size).astype(np.int64)
    _, group_of = np.unique(keys, axis=0, return_inverse=True)
    group_of = group_of.astype(np.int64)
    num_groups = int(group_of.max()) + 1

    order = np.argsort(group_of, kind="stable")
    counts = np.bincount(group_of, minlength=num_groups)
    offsets = np.zeros(num_groups + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    starts = offsets[:-1]

    sorted_pos = prev.positions[order]
    sorted_w = prev.weights[order]
    sorted_mass = prev.label_dists[order] * sorted_w[:, None]

    centroids = np.add.reduceat(sorted_pos, starts, axis=0) / counts[:, None]
    group_w = np.add.reduceat(sorted_w, starts)
    dists = np.add.reduceat(sorted_mass, starts, axis=0) / group_w[:, None]

    return StageRecord(
        positions=centroids,
        label_dists=dists,
        weights=group_w,
        radius=radius,
        group_offsets=offsets,
        member_indices=order,
        parent_to_group=group_of,
    )


@dataclass
class SamplingHierarchy:
    """Grid-pooled multi-resolution view of a cloud.

    Stage 0 is the input itself (one-hot distributions). Stage n pools stage
    n-1 with cell size ``base_cell * 2**(n-1)``; the per-stage neighborhood
    radius is ``base_radius * 2**n``.
    """

    stages: List[StageRecord] = field(default_factory=list)
    num_classes: int = 0
    base_cell: float = 0.0
    base_radius: float = 0.0

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage(self, n: int) -> StageRecord:
        return self.stages[n]

    def stage_radius(self, n: int) -> float:
        return self.base_radius * (2.0 ** n)


def build_hierarchy(cloud: PointCloud, base_cell: float, base_radius: float,
                    num_stages: int) -> SamplingHierarchy:
    """Build ``num_stages`` levels by repeated grid pooling with doubling cells."""
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    if base_cell <= 0 or base_radius <= 0:
        raise ValueError("base_cell and base_radius must be positive")
    one_hot = np.zeros((cloud.num_points, cloud.num_classes), dtype=np.float64)
    one_hot[np.arange(cloud.num_points), cloud.gt_labels] = 1.0
    stages = [StageRecord(
        positions=cloud.positions.copy(),
        label_dists=one_hot,
        weights=np.ones(cloud.num_points, dtype=np.float64),
        radius=base_radius,
    )]
    for n in range(1, num_stages):
        stages.append(grid_subsample(stages[-1], base_cell * (2.0 ** (n - 1)),
                                     radius=base_radius * (2.0 ** n)))
    return SamplingHierarchy(stages=stages, num_classes=cloud.num_classes,
                             base_cell=base_cell, base_radius=base_radius)
