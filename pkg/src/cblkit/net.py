"""Continuous-convolution segmentation network with hand-written gradients.

A conv layer gates neighbor features with a position-dependent kernel and
averages over the neighborhood (self included):

    out_i = act( proj^T . mean_{j in N_i + {i}} g(x_i - x_j) * f_j  + bias )

where g is a one-hidden-layer MLP from the 3-D offset to one gate per input
channel. The network is a small encoder/decoder over a grid-pooling
hierarchy; the decoder upsamples by copying each parent feature to its
children. No autodiff framework: every backward pass below is derived and
summed in a fixed order, so results are bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .cloud import (NeighborhoodIndex, PointCloud, SamplingHierarchy,
                    StageRecord, build_index)
from .loss import FeatureMatrix

CHECKPOINT_MAGIC = b"CBL1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Architecture plus the input-pipeline geometry the net was built for."""

    num_classes: int
    num_stages: int = 3
    widths: Tuple[int, ...] = (16, 32, 64)
    multi_scale_head: bool = True
    cbl_stages: Optional[Tuple[int, ...]] = None  # None = every stage
    rng_seed: int = 0
    input_width: int = 8
    kernel_hidden: int = 8
    base_cell: float = 0.1
    boundary_radius: float = 0.1

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != self.num_stages:
            raise ValueError("need one width per stage")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.input_width < 1 or self.kernel_hidden < 1:
            raise ValueError("input_width and kernel_hidden must be positive")
        if self.base_cell <= 0 or self.boundary_radius <= 0:
            raise ValueError("base_cell and boundary_radius must be positive")
        if self.cbl_stages is not None:
            stages = tuple(sorted(int(s) for s in self.cbl_stages))
            if any(not 0 <= s < self.num_stages for s in stages):
                raise ValueError("cbl_stages out of range")
            object.__setattr__(self, "cbl_stages", stages)

    def resolved_cbl_stages(self) -> Tuple[int, ...]:
        if self.cbl_stages is None:
            return tuple(range(self.num_stages))
        return self.cbl_stages


@dataclass
class StageGeometry:
    """Static neighbor structure of one stage, reusable across steps.

    Pairs list every (i, j) with j in the conv neighborhood of i (self
    first, then radius neighbors in ascending order). ``delta`` holds the
    offsets (x_i - x_j) / radius so kernel inputs are O(1) at every stage.
    """

    num_points: int
    radius: float
    pairs_i: np.ndarray
    pairs_j: np.ndarray
    delta: np.ndarray
    inv_count: np.ndarray  # 1 / |N_i + {i}| per point
    i_starts: np.ndarray   # reduceat starts, pairs grouped by i
    j_perm: np.ndarray     # pair permutation sorting by j
    j_starts: np.ndarray

    @classmethod
    def build(cls, positions, radius: float,
              index: Optional[NeighborhoodIndex] = None) -> "StageGeometry":
        if radius <= 0:
            raise ValueError("radius must be positive")
        positions = np.asarray(positions, dtype=np.float64)
        if index is None:
            index = build_index(positions)
        nbr, offsets = index.radius_query_all(radius)
        n = positions.shape[0]
        counts = np.diff(offsets) + 1  # plus self
        total = int(counts.sum())
        starts = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=starts[1:])
        pairs_j = np.empty(total, dtype=np.int64)
        pairs_j[starts[:-1]] = np.arange(n)
        rest = np.ones(total, dtype=bool)
        rest[starts[:-1]] = False
        pairs_j[rest] = nbr
        pairs_i = np.repeat(np.arange(n), counts)
        delta = (positions[pairs_i] - positions[pairs_j]) / radius
        j_perm = np.argsort(pairs_j, kind="stable")
        j_starts = np.searchsorted(pairs_j[j_perm], np.arange(n))
        return cls(num_points=n, radius=radius, pairs_i=pairs_i, pairs_j=pairs_j,
                   delta=delta, inv_count=1.0 / counts, i_starts=starts[:-1],
                   j_perm=j_perm, j_starts=j_starts)

    def neighbor_row(self, i: int) -> np.ndarray:
        """Radius neighbors of i (self stripped), ascending."""
        lo = self.i_starts[i] + 1
        hi = self.i_starts[i + 1] if i + 1 < self.num_points else self.pairs_j.size
        return self.pairs_j[lo:hi]


class ConvLayer:
    """One gated-neighborhood convolution block.

    Parameters in declaration order: kernel w1 (3, H), b1 (H,), kernel
    w2 (H, C_in), b2 (C_in,), proj (C_in, C_out), bias (C_out,).
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "proj", "bias")

    def __init__(self, c_in: int, c_out: int, hidden: int, rng,
                 activation: str = "relu"):
        if activation not in ("relu", "linear"):
            raise ValueError("activation must be 'relu' or 'linear'")
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden
        self.activation = activation
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / 3.0), size=(3, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, c_in))
        # start the gates near 1 so the layer begins close to average pooling
        self.b2 = np.ones(c_in)
        self.proj = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
        self.bias = np.zeros(c_out)

    def params(self) -> List[np.ndarray]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def forward(self, geom: StageGeometry, feats: np.ndarray):
        pre1 = geom.delta @ self.w1 + self.b1
        hid = np.maximum(pre1, 0.0)
        gate = hid @ self.w2 + self.b2
        fj = feats[geom.pairs_j]
        prod = gate * fj
        m = np.add.reduceat(prod, geom.i_starts, axis=0) * geom.inv_count[:, None]
        u = m @ self.proj + self.bias
        out = np.maximum(u, 0.0) if self.activation == "relu" else u
        cache = (feats, pre1, hid, gate, fj, m, u)
        return out, cache

    def backward(self, geom: StageGeometry, cache, dout: np.ndarray):
        feats, pre1, hid, gate, fj, m, u = cache
        du = dout * (u > 0.0) if self.activation == "relu" else dout
        dbias = du.sum(axis=0)
        dproj = m.T @ du
        dm = (du @ self.proj.T) * geom.inv_count[:, None]
        dprod = dm[geom.pairs_i]
        dgate = dprod * fj
        dfj = dprod * gate
        dfeats = np.add.reduceat(dfj[geom.j_perm], geom.j_starts, axis=0)
        db2 = dgate.sum(axis=0)
        dw2 = hid.T @ dgate
        dhid = dgate @ self.w2.T
        dpre1 = dhid * (pre1 > 0.0)
        db1 = dpre1.sum(axis=0)
        dw1 = geom.delta.T @ dpre1
        return dfeats, [dw1, db1, dw2, db2, dproj, dbias]


def conv_forward(layer: ConvLayer, geom: StageGeometry, feats: np.ndarray) -> np.ndarray:
    """Features after one conv block; convenience wrapper without the cache."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] != geom.num_points:
        raise ValueError("feature rows must match the geometry's point count")
    out, _ = layer.forward(geom, feats)
    return out


def pool_mean(rec: StageRecord, feats_prev: np.ndarray) -> np.ndarray:
    counts = np.diff(rec.group_offsets)
    sums = np.add.reduceat(feats_prev[rec.member_indices], rec.group_offsets[:-1],
                           axis=0)
    return sums / counts[:, None]


def pool_mean_backward(rec: StageRecord, dnext: np.ndarray) -> np.ndarray:
    counts = np.diff(rec.group_offsets)
    return (dnext / counts[:, None])[rec.parent_to_group]


def upsample_copy(rec: StageRecord, feats_next: np.ndarray) -> np.ndarray:
    return feats_next[rec.parent_to_group]


def upsample_copy_backward(rec: StageRecord, dprev: np.ndarray) -> np.ndarray:
    return np.add.reduceat(dprev[rec.member_indices], rec.group_offsets[:-1], axis=0)


def ancestor_maps(hierarchy: SamplingHierarchy) -> List[np.ndarray]:
    """maps[n][i] = index of the stage-n ancestor of stage-0 point i."""
    maps = [np.arange(hierarchy.stage(0).num_points, dtype=np.int64)]
    for n in range(1, hierarchy.num_stages):
        maps.append(hierarchy.stage(n).parent_to_group[maps[n - 1]])
    return maps


def build_geometries(hierarchy: SamplingHierarchy,
                     index0: Optional[NeighborhoodIndex] = None) -> List[StageGeometry]:
    geoms = []
    for n in range(hierarchy.num_stages):
        rec = hierarchy.stage(n)
        idx = index0 if n == 0 else None
        geoms.append(StageGeometry.build(rec.positions, hierarchy.stage_radius(n),
                                         index=idx))
    return geoms


@dataclass
class NetOutput:
    logits: np.ndarray
    taps: Dict[int, FeatureMatrix]
    hierarchy: SamplingHierarchy
    geoms: List[StageGeometry]
    enc_outs: List[np.ndarray] = field(repr=False, default=None)
    dec_outs: List[np.ndarray] = field(repr=False, default=None)
    caches: Dict = field(repr=False, default=None)
    head_in: np.ndarray = field(repr=False, default=None)


class SegNet:
    """Encoder/decoder over a grid hierarchy with a linear classifier.

    The contrastive taps are the stage-0 decoder output plus the encoder
    outputs of every deeper stage (they live on the points the per-stage
    boundary sets are mined on).
    """

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.rng_seed)
        s = cfg.num_stages
        widths = cfg.widths
        self.enc = []
        for n in range(s):
            c_in = cfg.input_width if n == 0 else widths[n - 1]
            self.enc.append(ConvLayer(c_in, widths[n], cfg.kernel_hidden, rng))
        # decoder blocks in computation order: deepest-but-one down to stage 0
        self.dec = {}
        for n in range(s - 2, -1, -1):
            self.dec[n] = ConvLayer(widths[n + 1], widths[n], cfg.kernel_hidden, rng)
        head_dim = sum(widths) if cfg.multi_scale_head else widths[0]
        self.head_dim = head_dim
        self.wc = rng.normal(0.0, np.sqrt(1.0 / head_dim),
                             size=(head_dim, cfg.num_classes))
        self.bc = np.zeros(cfg.num_classes)

    # parameter bookkeeping -------------------------------------------------

    def _layer_items(self):
        items = [("enc", n, self.enc[n]) for n in range(self.cfg.num_stages)]
        items += [("dec", n, self.dec[n]) for n in range(self.cfg.num_stages - 2, -1, -1)]
        return items

    def param_arrays(self) -> List[np.ndarray]:
        """All parameter tensors in declaration order (checkpoint order)."""
        out = []
        for _, _, layer in self._layer_items():
            out.extend(layer.params())
        out.extend([self.wc, self.bc])
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    def get_param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params():
            raise ValueError("parameter vector has the wrong size")
        pos = 0
        for p in self.param_arrays():
            p[...] = vec[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    # forward / backward ----------------------------------------------------

    def run(self, hierarchy: SamplingHierarchy,
            geoms: List[StageGeometry]) -> NetOutput:
        cfg = self.cfg
        s = cfg.num_stages
        if hierarchy.num_stages != s:
            raise ValueError("hierarchy depth does not match the network")
        caches = {}
        enc_outs = []
        feats = np.ones((hierarchy.stage(0).num_points, cfg.input_width))
        for n in range(s):
            if n > 0:
                feats = pool_mean(hierarchy.stage(n), enc_outs[n - 1])
            out, cache = self.enc[n].forward(geoms[n], feats)
            caches[("enc", n)] = cache
            enc_outs.append(out)
        dec_outs = [None] * s
        dec_outs[s - 1] = enc_outs[s - 1]
        for n in range(s - 2, -1, -1):
            up = upsample_copy(hierarchy.stage(n + 1), dec_outs[n + 1])
            out, cache = self.dec[n].forward(geoms[n], up)
            caches[("dec", n)] = cache
            dec_outs[n] = out
        if cfg.multi_scale_head:
            anc = ancestor_maps(hierarchy)
            blocks = [dec_outs[0]] + [dec_outs[n][anc[n]] for n in range(1, s)]
            head_in = np.concatenate(blocks, axis=1)
        else:
            head_in = dec_outs[0]
        logits = head_in @ self.wc + self.bc
        taps = {0: FeatureMatrix(0, dec_outs[0])}
        for n in range(1, s):
            taps[n] = FeatureMatrix(n, enc_outs[n])
        return NetOutput(logits=logits, taps=taps, hierarchy=hierarchy,
                         geoms=geoms, enc_outs=enc_outs, dec_outs=dec_outs,
                         caches=caches, head_in=head_in)

    def backward(self, out: NetOutput, dlogits: np.ndarray,
                 dtaps: Optional[Dict[int, np.ndarray]] = None) -> List[np.ndarray]:
        """Parameter gradients for d(loss)/d(logits) plus optional extra
        gradients flowing into the contrastive taps. Order matches
        param_arrays()."""
        cfg = self.cfg
        s = cfg.num_stages
        hierarchy, geoms = out.hierarchy, out.geoms
        dtaps = dtaps or {}
        grads = {}

        dwc = out.head_in.T @ dlogits
        dbc = dlogits.sum(axis=0)
        dhead = dlogits @ self.wc.T
        ddec = [np.zeros_like(out.dec_outs[n]) for n in range(s)]
        if cfg.multi_scale_head:
            anc = ancestor_maps(hierarchy)
            pos = 0
            for n in range(s):
                block = dhead[:, pos:pos + cfg.widths[n]]
                pos += cfg.widths[n]
                if n == 0:
                    ddec[0] += block
                else:
                    np.add.at(ddec[n], anc[n], block)
        else:
            ddec[0] += dhead
        if 0 in dtaps:
            ddec[0] = ddec[0] + dtaps[0]

        for n in range(0, s - 1):
            dup, layer_grads = self.dec[n].backward(geoms[n], out.caches[("dec", n)],
                                                    ddec[n])
            grads[("dec", n)] = layer_grads
            ddec[n + 1] += upsample_copy_backward(hierarchy.stage(n + 1), dup)

        # taps for n >= 1 sit on encoder outputs; stage s-1 is injected here,
        # the mid stages as their denc is assembled on the way down
        denc = [None] * s
        denc[s - 1] = ddec[s - 1]
        if s - 1 >= 1 and (s - 1) in dtaps:
            denc[s - 1] = denc[s - 1] + dtaps[s - 1]
        for n in range(s - 1, -1, -1):
            grad_in = denc[n]
            dfeats, layer_grads = self.enc[n].backward(geoms[n], out.caches[("enc", n)],
                                                       grad_in)
            grads[("enc", n)] = layer_grads
            if n > 0:
                prev = pool_mean_backward(hierarchy.stage(n), dfeats)
                base = prev
                if (n - 1) >= 1 and (n - 1) in dtaps:
                    base = base + dtaps[n - 1]
                denc[n - 1] = base

        ordered = []
        for kind, n, _ in self._layer_items():
            ordered.extend(grads[(kind, n)])
        ordered.extend([dwc, dbc])
        return ordered


def forward(net: SegNet, cloud: PointCloud, hierarchy: SamplingHierarchy,
            geoms: Optional[List[StageGeometry]] = None) -> NetOutput:
    """Logits and per-stage tap features for one scene."""
    if hierarchy.stage(0).num_points != cloud.num_points:
        raise ValueError("hierarchy does not belong to this cloud")
    if geoms is None:
        geoms = build_geometries(hierarchy)
    return net.run(hierarchy, geoms)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logits gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = expz / denom
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# checkpoint format: magic, uint32 little-endian JSON length, JSON config,
# then every parameter tensor as raw float64 little-endian in declaration
# order. Shapes are implied by the config.

def save_checkpoint(path, net: SegNet, train_meta: Optional[dict] = None) -> None:
    doc = {"net": asdict(net.cfg), "train": dict(train_meta or {})}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.param_arrays():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[SegNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint header")
    (blob_len,) = struct.unpack("<I", raw[4:8])
    blob = raw[8:8 + blob_len]
    if len(blob) != blob_len:
        raise CheckpointError("truncated checkpoint config")
    try:
        doc = json.loads(blob.decode("utf-8"))
        cfg_doc = dict(doc["net"])
        cfg_doc["widths"] = tuple(cfg_doc["widths"])
        if cfg_doc.get("cbl_stages") is not None:
            cfg_doc["cbl_stages"] = tuple(cfg_doc["cbl_stages"])
        cfg = NetConfig(**cfg_doc)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}")
    net = SegNet(cfg)
    body = raw[8 + blob_len:]
    expected = net.num_params() * 8
    if len(body) != expected:
        raise CheckpointError(f"expected {expected} tensor bytes, got {len(body)}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    net.set_param_vector(vec)
    return net, doc.get("train", {})
