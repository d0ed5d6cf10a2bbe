"""Full-batch-per-scene training with SGD momentum and an exponential lr decay.

One optimizer update per scene per epoch, scenes visited in list order, all
math in float64 with fixed summation order — rerunning the same seed and
inputs reproduces checkpoints and logs byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import (NeighborhoodIndex, PointCloud, SamplingHierarchy,
                    build_hierarchy, build_index)
from .loss import _loss_grad_from_csr
from .metrics import MetricsReport, ReportCounts, report_counts
from .mining import MiningConfig, mine_stage_boundaries, stage_labels_argmax
from .net import (NetConfig, NetOutput, SegNet, StageGeometry,
                  build_geometries, softmax_cross_entropy)

LOG_HEADER = "epoch,ce,cbl_total,total,lr"


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; the run cannot be salvaged."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.98
    weight_decay: float = 1e-3
    lr_decay: float = 0.1 ** (1.0 / 20.0)
    lam: float = 0.1
    tau: float = 1.0
    mining: MiningConfig = MiningConfig()

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class CblStageData:
    """Mined boundary of one stage plus its flat neighbor lists (CSR)."""

    candidates: np.ndarray
    neighbors: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray  # hard per-point labels at this stage


@dataclass
class SceneCache:
    """Everything about a scene that does not change across steps."""

    cloud: PointCloud
    hierarchy: SamplingHierarchy
    geoms: List[StageGeometry]
    index0: NeighborhoodIndex
    cbl: Dict[int, CblStageData] = field(default_factory=dict)

    @property
    def labels0(self) -> np.ndarray:
        return self.cloud.gt_labels


def _stage_csr(geom: StageGeometry, candidates: np.ndarray):
    """Self-free neighbor rows of the candidates, sliced out of the conv
    geometry (whose rows carry self first)."""
    ends = np.append(geom.i_starts[1:], geom.pairs_j.size)
    lo = geom.i_starts[candidates] + 1
    hi = ends[candidates]
    offsets = np.zeros(candidates.size + 1, dtype=np.int64)
    np.cumsum(hi - lo, out=offsets[1:])
    if candidates.size:
        neighbors = np.concatenate([geom.pairs_j[a:b] for a, b in zip(lo, hi)])
    else:
        neighbors = np.empty(0, dtype=np.int64)
    return neighbors, offsets


def build_scene_cache(cloud: PointCloud, net_cfg: NetConfig,
                      mining: Optional[MiningConfig] = None,
                      with_cbl: bool = True,
                      cbl_stages: Optional[Sequence[int]] = None) -> SceneCache:
    """Hierarchy, conv geometry and (optionally) mined contrastive sets.

    ``cbl_stages`` defaults to the net's own list; passing a superset lets
    one cache serve several configurations of the same scene.
    """
    mining = mining or MiningConfig()
    index0 = build_index(cloud.positions)
    hierarchy = build_hierarchy(cloud, net_cfg.base_cell, net_cfg.boundary_radius,
                                net_cfg.num_stages)
    geoms = build_geometries(hierarchy, index0=index0)
    cache = SceneCache(cloud=cloud, hierarchy=hierarchy, geoms=geoms,
                       index0=index0)
    if with_cbl:
        stages = net_cfg.resolved_cbl_stages() if cbl_stages is None \
            else tuple(sorted(set(int(s) for s in cbl_stages)))
        for n in stages:
            bset = mine_stage_boundaries(hierarchy, n, mining)
            neighbors, offsets = _stage_csr(geoms[n], bset.indices)
            cache.cbl[n] = CblStageData(candidates=bset.indices,
                                        neighbors=neighbors, offsets=offsets,
                                        labels=stage_labels_argmax(hierarchy, n))
    return cache


@dataclass
class StepResult:
    total: float
    ce: float
    cbl_total: float  # sum over stages, before the lambda weight
    grads: List[np.ndarray]
    output: NetOutput


def step_losses(net: SegNet, cache: SceneCache, cfg: TrainConfig,
                want_grads: bool = True) -> StepResult:
    """One scene's losses and (optionally) parameter gradients.

    total = cross-entropy + lam * sum of per-stage contrastive losses. With
    lam == 0 the contrastive path is skipped outright, so a zero weight and
    an empty stage list produce bit-identical runs.
    """
    out = net.run(cache.hierarchy, cache.geoms)
    ce, dlogits = softmax_cross_entropy(out.logits, cache.labels0)
    cbl_total = 0.0
    dtaps: Dict[int, np.ndarray] = {}
    if cfg.lam > 0:
        for n in net.cfg.resolved_cbl_stages():
            data = cache.cbl.get(n)
            if data is None:
                raise ValueError(f"scene cache has no contrastive data for stage {n}")
            loss_n, _, _, grad_n = _loss_grad_from_csr(
                out.taps[n].values, data.labels, data.candidates,
                data.neighbors, data.offsets, cfg.tau, want_grad=want_grads)
            cbl_total += loss_n
            if want_grads:
                dtaps[n] = cfg.lam * grad_n
    total = ce + cfg.lam * cbl_total
    grads = net.backward(out, dlogits, dtaps or None) if want_grads else []
    return StepResult(total=total, ce=ce, cbl_total=cbl_total, grads=grads,
                      output=out)


def train(net: SegNet, scenes: Sequence[PointCloud], cfg: TrainConfig,
          caches: Optional[Sequence[SceneCache]] = None) -> List[dict]:
    """Train in place; returns one log row per epoch.

    Row fields: epoch, ce, cbl_total, total, lr — the losses are means over
    the epoch's scenes, cbl_total before the lambda weight.
    """
    if caches is None:
        caches = [build_scene_cache(c, net.cfg, mining=cfg.mining,
                                    with_cbl=cfg.lam > 0) for c in scenes]
    if len(caches) == 0:
        raise ValueError("need at least one scene")
    params = net.param_arrays()
    vels = [np.zeros_like(p) for p in params]
    rows = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        ce_sum = cbl_sum = total_sum = 0.0
        for cache in caches:
            res = step_losses(net, cache, cfg)
            if not np.isfinite(res.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (total={res.total})")
            ce_sum += res.ce
            cbl_sum += res.cbl_total
            total_sum += res.total
            for p, v, g in zip(params, vels, res.grads):
                v *= cfg.momentum
                v += g + cfg.weight_decay * p
                p -= lr * v
        k = len(caches)
        rows.append({"epoch": epoch, "ce": ce_sum / k, "cbl_total": cbl_sum / k,
                     "total": total_sum / k, "lr": lr})
    return rows


def log_to_csv(rows: Sequence[dict]) -> str:
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(f"{r['epoch']},{r['ce']!r},{r['cbl_total']!r},"
                     f"{r['total']!r},{r['lr']!r}")
    return "\n".join(lines) + "\n"


def predict(net: SegNet, cache: SceneCache) -> np.ndarray:
    """Hard per-point labels for one scene (ties go to the lower class id)."""
    out = net.run(cache.hierarchy, cache.geoms)
    return np.argmax(out.logits, axis=1)


def evaluate(net: SegNet, scenes: Sequence[PointCloud],
             caches: Optional[Sequence[SceneCache]] = None,
             ) -> Tuple[MetricsReport, List[MetricsReport]]:
    """Aggregate report (counts pooled across scenes, then divided) plus one
    report per scene. Uses the boundary radius the net was configured with."""
    if caches is None:
        caches = [build_scene_cache(c, net.cfg, with_cbl=False) for c in scenes]
    if len(caches) == 0:
        raise ValueError("need at least one scene")
    pooled: Optional[ReportCounts] = None
    per_scene = []
    for cache in caches:
        pred = predict(net, cache)
        scored = cache.cloud.with_pred_labels(pred)
        counts = report_counts(scored, net.cfg.boundary_radius, index=cache.index0)
        per_scene.append(counts.to_report())
        pooled = counts if pooled is None else pooled.merge(counts)
    return pooled.to_report(), per_scene
