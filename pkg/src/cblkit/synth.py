"""Synthetic labeled scenes.

The segmentation net only ever sees relative positions, so a label is
learnable exactly when its class has a distinctive local shape. The
planar-rooms layout therefore assigns each class a geometric family --
horizontal sheet, vertical wall strip, round clutter blob, thin vertical
pole -- rather than a region of space. Checkerboard deliberately gives all
classes the same local shape (a flat slab with gridded labels); it exists
to stress boundary extraction, not to be learnable. Blobs sit in between.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from .cloud import PointCloud

LAYOUTS = ("planar-rooms", "checkerboard", "blobs")

# share of points per geometric family (sheet, wall, blob, pole); classes
# beyond four cycle through the families at a reduced scale
_FAMILY_WEIGHTS = (0.40, 0.25, 0.20, 0.15)


@dataclass(frozen=True)
class SynthConfig:
    rng_seed: int = 0
    num_points: int = 2000
    num_classes: int = 4
    layout: str = "planar-rooms"
    jitter: float = 0.03
    extent: float = 2.0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_points < self.num_classes:
            raise ValueError("need at least one point per class")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def _allocate(total: int, weights) -> np.ndarray:
    """Split total into integer counts proportional to weights (cumulative
    rounding, so the result is deterministic and sums exactly)."""
    w = np.asarray(weights, dtype=np.float64)
    edges = np.round(np.cumsum(w / w.sum()) * total).astype(np.int64)
    return np.diff(np.concatenate([[0], edges]))


def _planar_rooms(rng, cfg: SynthConfig):
    e = cfg.extent
    k = cfg.num_classes
    counts = _allocate(cfg.num_points, [_FAMILY_WEIGHTS[c % 4] / (1 + c // 4)
                                        for c in range(k)])
    chunks = []
    for c in range(k):
        n = int(counts[c])
        fam, rep = c % 4, c // 4
        scale = 1.0 / (1 + rep)
        lift = 0.6 * rep  # repeats float above the originals
        pts = np.zeros((n, 3))
        if fam == 0:  # horizontal sheet
            pts[:, :2] = rng.uniform(0.0, e, size=(n, 2))
            pts[:, 2] = rng.uniform(0.0, 0.02 * scale, size=n)
        elif fam == 1:  # vertical wall strips
            lines = rng.uniform(0.2 * e, 0.8 * e, size=2)
            pick = rng.integers(0, lines.size, size=n)
            pts[:, 0] = lines[pick] + rng.uniform(-0.01, 0.01, size=n)
            pts[:, 1] = rng.uniform(0.0, e, size=n)
            pts[:, 2] = rng.uniform(0.0, 0.5 * scale, size=n)
        elif fam == 2:  # round clutter hovering clear of the sheet, so blob
            # interiors stay separable from floor interiors
            centers = np.column_stack([
                rng.uniform(0.1 * e, 0.9 * e, size=(5, 2)),
                np.full(5, 0.15 * scale)])
            pick = rng.integers(0, 5, size=n)
            pts[:] = centers[pick] + rng.normal(0.0, 0.04 * scale, size=(n, 3))
        else:  # thin vertical poles
            bases = rng.uniform(0.05 * e, 0.95 * e, size=(6, 2))
            pick = rng.integers(0, 6, size=n)
            pts[:, :2] = bases[pick] + rng.normal(0.0, 0.008, size=(n, 2))
            pts[:, 2] = rng.uniform(0.0, 0.45 * scale, size=n)
        pts[:, 2] += lift
        chunks.append((pts, np.full(n, c, dtype=np.int64)))
    pos = np.concatenate([p for p, _ in chunks])
    lab = np.concatenate([l for _, l in chunks])
    return pos, lab


def _checkerboard(rng, cfg: SynthConfig):
    cells = 4
    cell = cfg.extent / cells
    pos = np.zeros((cfg.num_points, 3))
    pos[:, :2] = rng.uniform(0.0, cfg.extent, size=(cfg.num_points, 2))
    pos[:, 2] = rng.uniform(0.0, 0.03, size=cfg.num_points)
    ij = np.minimum((pos[:, :2] / cell).astype(np.int64), cells - 1)
    lab = (ij[:, 0] + ij[:, 1]) % cfg.num_classes
    return pos, lab


def _blobs(rng, cfg: SynthConfig):
    e = cfg.extent
    k = cfg.num_classes
    counts = _allocate(cfg.num_points, np.ones(k))
    chunks = []
    for c in range(k):
        n = int(counts[c])
        centers = rng.uniform(0.25 * e, 0.75 * e, size=(3, 3))
        spread = 0.06 * e / 2.0 * (1.0 + 0.6 * c)
        pick = rng.integers(0, 3, size=n)
        pts = centers[pick] + rng.normal(0.0, spread, size=(n, 3))
        chunks.append((pts, np.full(n, c, dtype=np.int64)))
    pos = np.concatenate([p for p, _ in chunks])
    lab = np.concatenate([l for _, l in chunks])
    return pos, lab


_BUILDERS = {"planar-rooms": _planar_rooms, "checkerboard": _checkerboard,
             "blobs": _blobs}


def generate(cfg: SynthConfig) -> PointCloud:
    """One scene with ground-truth labels only."""
    rng = np.random.default_rng(cfg.rng_seed)
    pos, lab = _BUILDERS[cfg.layout](rng, cfg)
    if cfg.jitter > 0:
        pos = pos + rng.normal(0.0, cfg.jitter, size=pos.shape)
    perm = rng.permutation(cfg.num_points)  # no class-sorted point order
    return PointCloud(pos[perm], lab[perm], num_classes=cfg.num_classes)


def scene_seed(base_seed: int, index: int, test: bool = False) -> int:
    """Per-scene seed; train and test draws never collide across bases that
    are less than a million apart."""
    return base_seed * 1_000_003 + (500_000 if test else 0) + index


def generate_split(cfg: SynthConfig, num_train: int, num_test: int,
                   ) -> Tuple[List[PointCloud], List[PointCloud]]:
    """Disjointly seeded train/test scenes derived from cfg.rng_seed."""
    train = [generate(replace(cfg, rng_seed=scene_seed(cfg.rng_seed, i)))
             for i in range(num_train)]
    test = [generate(replace(cfg, rng_seed=scene_seed(cfg.rng_seed, i, test=True)))
            for i in range(num_test)]
    return train, test
