"""Boundary mining on pooled (sub-scene) label distributions.

Pooled points carry class histograms instead of hard labels, so "different
label" needs a definition per stage. Three variants: compare argmax labels,
compare distributions by symmetric KL against a threshold, or borrow labels
from the nearest input point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import SamplingHierarchy, build_index
from .metrics import BoundarySet, extract_boundary

VARIANTS = ("argmax", "kl_threshold", "nearest")


@dataclass(frozen=True)
class MiningConfig:
    variant: str = "argmax"
    kl_threshold: float = 0.5
    kl_epsilon: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.kl_threshold < 0:
            raise ValueError("kl_threshold must be non-negative")
        if not 0 < self.kl_epsilon <= 1e-3:
            raise ValueError("kl_epsilon must lie in (0, 1e-3]")


def stage_labels_argmax(hierarchy: SamplingHierarchy, stage: int) -> np.ndarray:
    """Hard labels from pooled distributions; ties resolve to the lowest id."""
    return hierarchy.stage(stage).label_dists.argmax(axis=1).astype(np.int64)


def _smoothed(dists: np.ndarray, eps: float) -> np.ndarray:
    k = dists.shape[1]
    return (dists + eps) / (1.0 + k * eps)


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p||q) + KL(q||p); rows must be strictly positive."""
    log_ratio = np.log(p) - np.log(q)
    return np.sum(p * log_ratio, axis=-1) - np.sum(q * log_ratio, axis=-1)


def mine_stage_boundaries(hierarchy: SamplingHierarchy, stage: int,
                          config: MiningConfig) -> BoundarySet:
    """Boundary indices of one hierarchy stage under the configured variant.

    The neighborhood radius is the stage radius (doubling schedule). At stage
    0 every variant degenerates to plain boundary extraction on the input
    labels.
    """
    if not 0 <= stage < hierarchy.num_stages:
        raise ValueError(f"stage {stage} out of range")
    rec = hierarchy.stage(stage)
    index = build_index(rec.positions)
    radius = hierarchy.stage_radius(stage)

    if config.variant == "argmax":
        labels = stage_labels_argmax(hierarchy, stage)
        return extract_boundary(labels, index, radius, stage=stage)

    if config.variant == "nearest":
        input_index = build_index(hierarchy.stage(0).positions)
        src = input_index.nearest(rec.positions)
        labels = stage_labels_argmax(hierarchy, 0)[src]
        return extract_boundary(labels, index, radius, stage=stage)

    # kl_threshold: a point is boundary when some neighbor's smoothed
    # distribution sits farther than the threshold in symmetric KL
    smoothed = _smoothed(rec.label_dists, config.kl_epsilon)
    neighbors, offsets = index.radius_query_all(radius)
    owners = np.repeat(np.arange(rec.num_points), np.diff(offsets))
    div = symmetric_kl(smoothed[owners], smoothed[neighbors])
    hit = np.zeros(rec.num_points, dtype=bool)
    np.logical_or.at(hit, owners[div > config.kl_threshold], True)
    return BoundarySet(stage=stage, source="gt", indices=np.where(hit)[0],
                       num_points=rec.num_points)


def soft_vs_hard_divergence(hierarchy: SamplingHierarchy) -> dict:
    """Per-stage count of points where distribution argmax disagrees with
    iterated hard-label majority voting (one vote per pooled point, however
    many inputs it represents). Empty for a 1-stage hierarchy."""
    out = {}
    hard = stage_labels_argmax(hierarchy, 0)
    k = hierarchy.num_classes
    for n in range(1, hierarchy.num_stages):
        rec = hierarchy.stage(n)
        votes = np.zeros((rec.num_points, k), dtype=np.int64)
        np.add.at(votes, (rec.parent_to_group, hard), 1)
        hard = votes.argmax(axis=1).astype(np.int64)
        soft = stage_labels_argmax(hierarchy, n)
        out[n] = int((soft != hard).sum())
    return out
