"""Boundary contrastive loss with hand-derived gradients.

For every mined boundary point i with at least one same-label neighbor, the
loss scores how much closer (in feature space) the same-label neighbors sit
than the neighborhood at large:

    term_i = -log( sum_{j in N_i, l_j = l_i} exp(-||f_i - f_j|| / tau)
                   / sum_{k in N_i} exp(-||f_i - f_k|| / tau) )

and the loss is the mean term over those points. Boundary points with no
neighbor or no same-label neighbor contribute nothing and do not count in
the denominator. Everything is computed in float64 with fixed summation
order, so repeated evaluations are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .cloud import NeighborhoodIndex
from .metrics import BoundarySet


@dataclass(frozen=True)
class CblConfig:
    """Temperature and weight of the contrastive term."""

    tau: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass
class FeatureMatrix:
    """Per-point feature rows tied to a hierarchy stage."""

    stage: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("features must be 2-D (points x channels)")

    @property
    def num_points(self) -> int:
        return self.values.shape[0]


@dataclass
class CblContributions:
    """Per-point terms behind one loss value.

    ``indices`` lists the boundary points that actually contributed (had a
    neighbor and a same-label neighbor); ``terms[k]`` is the -log ratio of
    ``indices[k]``. ``num_candidates`` counts the boundary points offered.
    """

    indices: np.ndarray
    terms: np.ndarray
    num_candidates: int


def _loss_grad_from_csr(feats: np.ndarray, labels: np.ndarray, cand: np.ndarray,
                        nbr: np.ndarray, offsets: np.ndarray, tau: float,
                        want_grad: bool):
    """Shared core over flat candidate neighborhoods (CSR layout)."""
    num_cand = cand.size
    counts = np.diff(offsets)
    slot = np.repeat(np.arange(num_cand), counts)  # candidate slot per pair
    pi = cand[slot]
    pj = nbr

    diff = feats[pi] - feats[pj]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    positive = labels[pj] == labels[pi]

    has_any = counts > 0
    has_pos = np.bincount(slot, weights=positive.astype(np.float64),
                          minlength=num_cand) > 0
    used = has_any & has_pos
    num_used = int(used.sum())
    grad = np.zeros_like(feats) if want_grad else None
    if num_used == 0:
        return 0.0, np.empty(0, dtype=np.int64), np.empty(0), grad

    keep = used[slot]
    slot, pi, pj = slot[keep], pi[keep], pj[keep]
    diff, dist, positive = diff[keep], dist[keep], positive[keep]

    # shift exponents by the per-candidate min distance; the ratio is
    # unchanged and nothing can underflow to an all-zero denominator
    dmin = np.full(num_cand, np.inf)
    np.minimum.at(dmin, slot, dist)
    w = np.exp(-(dist - dmin[slot]) / tau)

    z_all = np.bincount(slot, weights=w, minlength=num_cand)
    z_pos = np.bincount(slot, weights=w * positive, minlength=num_cand)
    terms = np.log(z_all[used]) - np.log(z_pos[used])
    loss = float(terms.sum() / num_used)

    if want_grad:
        coeff = (w / tau) * (positive / z_pos[slot] - 1.0 / z_all[slot])
        coeff /= num_used
        unit = np.zeros_like(diff)
        nz = dist > 0
        unit[nz] = diff[nz] / dist[nz, None]
        flow = coeff[:, None] * unit
        np.add.at(grad, pi, flow)
        np.subtract.at(grad, pj, flow)

    return loss, cand[used], terms, grad


def _prepare(features, boundary, labels, index: NeighborhoodIndex, radius: float):
    feats = features.values if isinstance(features, FeatureMatrix) else features
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != index.num_points:
        raise ValueError("features must be (num_points, C)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (index.num_points,):
        raise ValueError("labels must match the indexed point count")
    cand = boundary.indices if isinstance(boundary, BoundarySet) else \
        np.asarray(boundary, dtype=np.int64)
    nbr, offsets = index.radius_query_many(cand, radius)
    return feats, labels, cand, nbr, offsets


def cbl_forward(features, boundary, labels, index: NeighborhoodIndex,
                radius: float, config: CblConfig) -> Tuple[float, CblContributions]:
    """Loss value plus the per-point breakdown for the given boundary set."""
    feats, labels, cand, nbr, offsets = _prepare(features, boundary, labels,
                                                 index, radius)
    loss, used, terms, _ = _loss_grad_from_csr(feats, labels, cand, nbr, offsets,
                                               config.tau, want_grad=False)
    return loss, CblContributions(indices=used, terms=terms,
                                  num_candidates=int(cand.size))


def cbl_backward(features, boundary, labels, index: NeighborhoodIndex,
                 radius: float, config: CblConfig) -> np.ndarray:
    """d(loss)/d(features): one row per point, zero where a point appears in
    no contributing term."""
    feats, labels, cand, nbr, offsets = _prepare(features, boundary, labels,
                                                 index, radius)
    _, _, _, grad = _loss_grad_from_csr(feats, labels, cand, nbr, offsets,
                                        config.tau, want_grad=True)
    return grad


def total_loss(ce: Tuple[float, np.ndarray],
               per_stage_cbl: Sequence[Tuple[float, np.ndarray]],
               config: CblConfig):
    """Combine cross-entropy with weighted per-stage contrastive terms.

    Args:
        ce: (value, gradient) of the cross-entropy.
        per_stage_cbl: (value, gradient) per tapped stage.
        config: supplies the contrastive weight.

    Returns:
        (total, ce_gradient, stage_gradients) with every stage gradient
        scaled by the weight; gradients combine linearly.
    """
    total = float(ce[0]) + config.lam * sum(float(v) for v, _ in per_stage_cbl)
    scaled = [config.lam * g for _, g in per_stage_cbl]
    return total, ce[1], scaled
