"""Point-cloud encoder: per-point features, attention refinement, global pool.

Two-level hierarchy: local ball neighborhoods feed a shared affine-relu
stack max-pooled per point; a downsampled centroid level widens the
receptive field; inverse-distance interpolation carries coarse features
back to every point. A channel gate (shared bottleneck over point-wise
mean and max pools) and a spatial gate (per-point channel statistics)
rescale features multiplicatively; the global descriptor is the unit-norm
row mean of the refined features.

All learnable state lives in a ModelParameters bag keyed by layer name;
forward passes build engine Vars so the same code path serves inference
and backprop.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ModelParameters, glorot_uniform, leaf
from .geometry import PointCloud, ball_neighborhoods, farthest_point_sample


@dataclass(frozen=True)
class EncoderConfig:
    M: int = 64
    r1: float = 0.2
    r2: float = 0.4
    max_neighbors: int = 32
    downsample_fraction: float = 0.25
    interp_neighbors: int = 3
    hidden1: int = 32
    hidden2: int = 64
    hidden_up: int = 64

    def __post_init__(self):
        if not (0.0 < self.r1 < self.r2 <= 2.0):
            raise ValueError("need 0 < r1 < r2 <= 2")
        if not (0.0 < self.downsample_fraction <= 1.0):
            raise ValueError("downsample fraction must be in (0, 1]")
        if self.M < 4 or self.M % 4 != 0:
            raise ValueError("M must be a positive multiple of 4")
        if self.max_neighbors < 1 or self.interp_neighbors < 1:
            raise ValueError("neighbor counts must be positive")


@dataclass
class FeatureMatrix:
    values: np.ndarray
    stage: str  # "raw" or "refined"

    def __post_init__(self):
        if self.stage not in ("raw", "refined"):
            raise ValueError("stage must be raw or refined")
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix has non-finite entries")


@dataclass
class GlobalFeature:
    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        if self.normalized:
            n = float(np.linalg.norm(self.vector.astype(np.float64)))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"normalized flag set but norm is {n}")


def init_params(cfg: EncoderConfig, rng: np.random.Generator,
                n_head_classes: int = 0) -> ModelParameters:
    """Fresh parameter bag; attention output layers start at zero so both
    gates open at exactly one half."""
    p = ModelParameters()

    def dense(name, fan_in, fan_out, zero=False, bias=0.0):
        if zero:
            w = np.zeros((fan_in, fan_out), dtype=engine.DEFAULT_DTYPE)
        else:
            w = glorot_uniform(rng, fan_in, fan_out)
        p.add(name + ".W", w)
        p.add(name + ".b",
              np.full(fan_out, bias, dtype=engine.DEFAULT_DTYPE))

    # trunk biases start slightly positive: a point's offset to itself is
    # exactly zero, and a zero bias would park those rows on the relu corner
    dense("l1.0", 3, cfg.hidden1, bias=0.01)
    dense("l1.1", cfg.hidden1, cfg.hidden1, bias=0.01)
    dense("l2.0", cfg.hidden1 + 3, cfg.hidden2, bias=0.01)
    dense("l2.1", cfg.hidden2, cfg.hidden2, bias=0.01)
    dense("up.0", cfg.hidden2 + cfg.hidden1, cfg.hidden_up, bias=0.01)
    dense("up.out", cfg.hidden_up, cfg.M)
    bottleneck = max(cfg.M // 4, 1)
    dense("att.ch.0", cfg.M, bottleneck)
    dense("att.ch.1", bottleneck, cfg.M, zero=True)
    dense("att.sp", 2, 1, zero=True)
    if n_head_classes > 0:
        dense("head", cfg.M, n_head_classes)
    return p


def _dense_block(x, leaves, name, activate=True):
    out = engine.affine(x, leaves[name + ".W"], leaves[name + ".b"])
    return engine.relu(out) if activate else out


def _interp_weights(points, centroids, k, eps=1e-8):
    """Inverse-distance weights over the k nearest centroids per point."""
    d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    k = min(k, len(centroids))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, order, axis=1)
    inv = 1.0 / np.maximum(dk, eps)
    w = inv / inv.sum(axis=1, keepdims=True)
    return order, w


def encode_per_point_vars(leaves, pc: PointCloud, cfg: EncoderConfig):
    """Var-level raw feature pipeline; geometry is fixed w.r.t. parameters."""
    pts = pc.points
    n = pc.n
    if n < 8:
        raise ValueError("encoder needs at least 8 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite coordinates")

    nbr1 = ball_neighborhoods(pts, pts, cfg.r1, cfg.max_neighbors)
    rel1 = (pts[nbr1] - pts[:, None, :]).reshape(-1, 3)
    x = leaf(rel1.astype(engine.DEFAULT_DTYPE))
    x = _dense_block(x, leaves, "l1.0")
    x = _dense_block(x, leaves, "l1.1")
    f1 = engine.group_max(x, n, cfg.max_neighbors)  # (n, hidden1)

    n2 = max(int(math.ceil(n * cfg.downsample_fraction)), 1)
    # start the centroid sweep at the lexicographically smallest point so
    # the hierarchy depends on geometry, not on row order
    start = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    cent_idx = farthest_point_sample(pc, n2, start=start)
    centroids = pts[cent_idx]
    nbr2 = ball_neighborhoods(pts, centroids, cfg.r2, cfg.max_neighbors)
    rel2 = (pts[nbr2] - centroids[:, None, :]).reshape(-1, 3)
    g2 = engine.gather_rows(f1, nbr2.reshape(-1))
    x = engine.concat(
        [g2, leaf(rel2.astype(engine.DEFAULT_DTYPE))], axis=1)
    x = _dense_block(x, leaves, "l2.0")
    x = _dense_block(x, leaves, "l2.1")
    f2 = engine.group_max(x, n2, cfg.max_neighbors)  # (n2, hidden2)

    up_idx, up_w = _interp_weights(pts, centroids, cfg.interp_neighbors)
    up = engine.interpolate_rows(f2, up_idx, up_w)  # (n, hidden2)
    x = engine.concat([up, f1], axis=1)
    x = _dense_block(x, leaves, "up.0")
    return _dense_block(x, leaves, "up.out", activate=False)  # (n, M)


def attention_refine_vars(leaves, f):
    """Channel and spatial gates applied to a raw feature Var."""
    m = f.value.shape[1]
    mean_c = engine.reshape(engine.row_mean_pool(f), (1, m))
    max_c = engine.reshape(engine.row_max_pool(f), (1, m))

    def bottleneck(v):
        v = _dense_block(v, leaves, "att.ch.0")
        return _dense_block(v, leaves, "att.ch.1", activate=False)

    ch_gate = engine.sigmoid(engine.add(bottleneck(mean_c),
                                        bottleneck(max_c)))  # (1, M)
    fc = engine.mul(f, ch_gate)
    # spatial stats are taken on the channel-gated matrix, so the point
    # gate sees which rows still carry signal after channel reweighting
    stats = engine.concat([engine.mean_over_channels(fc),
                           engine.max_over_channels(fc)], axis=1)  # (n, 2)
    sp_gate = engine.sigmoid(
        _dense_block(stats, leaves, "att.sp", activate=False))  # (n, 1)
    return engine.mul(fc, sp_gate)


def global_pool_vars(fr):
    """Unit-norm row mean of the refined features."""
    return engine.l2_normalize(engine.row_mean_pool(fr))


def forward_shape_vars(leaves, pc: PointCloud, cfg: EncoderConfig,
                       attend: bool = True):
    """attend=False bypasses the gates entirely (refined = raw)."""
    f = encode_per_point_vars(leaves, pc, cfg)
    fr = attention_refine_vars(leaves, f) if attend else f
    g = global_pool_vars(fr)
    return f, fr, g


def encode_per_point(params: ModelParameters, pc: PointCloud,
                     cfg: EncoderConfig) -> FeatureMatrix:
    f = encode_per_point_vars(params.leaves(), pc, cfg)
    return FeatureMatrix(values=f.value, stage="raw")


def attention_refine(params: ModelParameters,
                     f: FeatureMatrix) -> FeatureMatrix:
    if f.stage != "raw":
        raise ValueError("attention expects raw features")
    fr = attention_refine_vars(params.leaves(), leaf(f.values))
    return FeatureMatrix(values=fr.value, stage="refined")


def global_pool(fr: FeatureMatrix):
    """Returns (unit global feature, pre-normalization mean)."""
    if fr.stage != "refined":
        raise ValueError("global pool expects refined features")
    mean = fr.values.mean(axis=0, dtype=np.float64).astype(fr.values.dtype)
    norm = float(np.linalg.norm(mean.astype(np.float64)))
    if norm == 0.0:
        raise ValueError("cannot normalize an all-zero mean feature")
    return GlobalFeature(vector=(mean / norm).astype(fr.values.dtype)), mean


def forward_shape(params: ModelParameters, pc: PointCloud,
                  cfg: EncoderConfig, attend: bool = True):
    """(raw features, refined features, unit global feature)."""
    f = encode_per_point(params, pc, cfg)
    if attend:
        fr = attention_refine(params, f)
    else:
        fr = FeatureMatrix(values=f.values, stage="refined")
    g, _ = global_pool(fr)
    return f, fr, g
