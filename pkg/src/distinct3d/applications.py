"""Downstream uses: retrieval, adaptive sampling, view selection."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, normalize_unit_sphere
from .encoder import forward_shape
from .distinctiveness import DistinctivenessField, extract
from .pipeline import canonical_view
from .seeds import derive_rng

log = logging.getLogger(__name__)

DELTA_D_DEFAULT = 0.7


@dataclass
class RetrievalIndex:
    """Per-shape distinctiveness-guided features plus plain-global
    fallbacks, keyed by shape id."""

    entries: dict
    delta_d: float

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a retrieval index needs at least one entry")
        for sid, (h, g) in self.entries.items():
            if not np.all(np.isfinite(h)):
                raise ValueError(f"non-finite feature for {sid!r}")

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclass
class ViewScore:
    direction: np.ndarray
    camera_distance: float
    score: float
    visible_count: int

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise ValueError("view direction must be unit length")
        if self.direction[2] < -1e-12:
            raise ValueError("view direction must point into the upper "
                             "hemisphere")
        if self.visible_count == 0:
            if self.score != -1.0:
                raise ValueError("empty views carry the sentinel score -1")
        elif not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


def distinctive_global_feature(fr, d: DistinctivenessField,
                               delta_d: float = DELTA_D_DEFAULT) -> np.ndarray:
    """Mean of feature rows scoring above the threshold.

    No qualifying row → fall back to the top decile of d (logged).
    """
    rows = fr.values.astype(np.float64)
    if len(d.values) != len(rows):
        raise ValueError("field length must match the feature rows")
    keep = d.values > delta_d
    if not keep.any():
        k = max(1, math.ceil(len(rows) / 10))
        order = np.argsort(-d.values, kind="stable")[:k]
        log.warning("no point above delta_d=%.3f; falling back to the "
                    "top decile (%d rows)", delta_d, k)
        return rows[order].mean(axis=0)
    return rows[keep].mean(axis=0)


def build_retrieval_index(checkpoint, dataset,
                          delta_d: float = DELTA_D_DEFAULT) -> RetrievalIndex:
    """Index every record's h and unit global g from its canonical view."""
    cfg = checkpoint.config
    entries = {}
    for rec in dataset.records:
        view = canonical_view(rec, cfg.N)
        _, fr, g = forward_shape(checkpoint.params, view,
                                 cfg.encoder_config(),
                                 attend=cfg.uses_attention())
        d = extract(fr, shape_id=rec.shape_id)
        h = distinctive_global_feature(fr, d, delta_d)
        entries[rec.shape_id] = (h, g.vector.astype(np.float64))
    return RetrievalIndex(entries=entries, delta_d=delta_d)


def retrieve(index: RetrievalIndex, query_h, top_k: int,
             use_fallback: bool = False):
    """Shape ids ranked by ascending Euclidean distance; ties by id."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    query_h = np.asarray(query_h, dtype=np.float64)
    ranked = sorted(
        (float(np.linalg.norm((g if use_fallback else h) - query_h)), sid)
        for sid, (h, g) in index.entries.items())
    return [sid for _, sid in ranked[:top_k]]


def adaptive_poisson_sample(pc: PointCloud, d, r_min: float, r_max: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Dart throwing with per-point radius shrinking as distinctiveness
    grows; returns accepted indices in ascending order."""
    if not 0.0 < r_min <= r_max:
        raise ValueError("radii must satisfy 0 < r_min <= r_max")
    values = np.asarray(d.values if hasattr(d, "values") else d,
                        dtype=np.float64)
    if values.shape != (pc.n,):
        raise ValueError("field length must match the cloud")
    radius = r_max - (r_max - r_min) * values
    pts = pc.points.astype(np.float64)
    order = rng.permutation(pc.n)
    accepted = []
    for i in order:
        ok = True
        for j in accepted:
            if np.linalg.norm(pts[i] - pts[j]) < min(radius[i], radius[j]):
                ok = False
                break
        if ok:
            accepted.append(int(i))
    return np.sort(np.asarray(accepted, dtype=np.int64))


def _view_basis(direction):
    w = np.asarray(direction, dtype=np.float64)
    w = w / np.linalg.norm(w)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(w @ helper) > 0.999:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, w)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    return u, v, w


def visible_points(pc: PointCloud, direction, camera_distance: float,
                   resolution: int = 64) -> np.ndarray:
    """Orthographic depth-buffer visibility along -direction."""
    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    pts = pc.points.astype(np.float64)
    if len(pts) == 1:
        return np.ones(1, dtype=bool)
    u, v, w = _view_basis(direction)
    center = pts.mean(axis=0)
    rel = pts - center
    depth = camera_distance - rel @ w  # smaller = nearer to the camera
    a = rel @ u
    b = rel @ v
    lo_a, hi_a = a.min(), a.max()
    lo_b, hi_b = b.min(), b.max()
    span = max(hi_a - lo_a, hi_b - lo_b, 1e-12)
    ia = np.minimum(((a - lo_a) / span * resolution).astype(np.int64),
                    resolution - 1)
    ib = np.minimum(((b - lo_b) / span * resolution).astype(np.int64),
                    resolution - 1)
    cell = ia * resolution + ib
    nearest = np.full(resolution * resolution, np.inf)
    np.minimum.at(nearest, cell, depth)
    diameter = 2.0 * float(np.linalg.norm(rel, axis=1).max())
    eps_depth = 0.01 * max(diameter, 1e-12)
    return depth <= nearest[cell] + eps_depth


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """n roughly even unit directions with positive z."""
    i = np.arange(n, dtype=np.float64)
    z = (i + 0.5) / n
    phi = i * (np.pi * (3.0 - np.sqrt(5.0)))
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def select_views(pc: PointCloud, d, n_views: int = 50, focus=None,
                 resolution: int = 64):
    """Ranked ViewScore list, best first.

    focus, when given, is an axis-aligned (lo, hi) box: visibility still
    uses the whole scene, but only in-box points contribute to scores.
    """
    if pc.n == 0:
        raise ValueError("cannot rank views of an empty scene")
    if n_views < 1:
        raise ValueError("need at least one candidate view")
    values = np.asarray(d.values if hasattr(d, "values") else d,
                        dtype=np.float64)
    if values.shape != (pc.n,):
        raise ValueError("field length must match the scene")
    pts = pc.points.astype(np.float64)
    centroid = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - centroid, axis=1).max())
    cam_dist = 2.0 * max(radius, 1e-12)
    in_focus = np.ones(pc.n, dtype=bool)
    if focus is not None:
        lo, hi = (np.asarray(focus[0], dtype=np.float64),
                  np.asarray(focus[1], dtype=np.float64))
        in_focus = np.all((pts >= lo) & (pts <= hi), axis=1)
    dirs = fibonacci_hemisphere(n_views)
    scores = []
    for k in range(n_views):
        vis = visible_points(pc, dirs[k], cam_dist, resolution)
        sel = vis & in_focus
        count = int(sel.sum())
        score = float(values[sel].mean()) if count else -1.0
        scores.append(ViewScore(direction=dirs[k], camera_distance=cam_dist,
                                score=score, visible_count=count))
    order = np.argsort(-np.asarray([s.score for s in scores]), kind="stable")
    return [scores[int(k)] for k in order]


def scene_distinctiveness(pc: PointCloud, checkpoint,
                          patch_diameter: float) -> np.ndarray:
    """Patch-wise field over an arbitrary scene.

    Overlapping grid-seeded patches are normalized, scored with the
    trained model, scattered back (nearest sampled point), averaged where
    patches overlap, then min-max normalized over the scene.
    """
    if patch_diameter <= 0.0:
        raise ValueError("patch diameter must be positive")
    cfg = checkpoint.config
    pts = pc.points.astype(np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    spacing = patch_diameter / 2.0
    half = patch_diameter / 2.0
    counts = np.zeros(pc.n)
    sums = np.zeros(pc.n)
    n_axis = [int(np.floor((hi[k] - lo[k]) / spacing)) + 1 for k in range(3)]
    patch_idx = 0
    for ix in range(n_axis[0]):
        for iy in range(n_axis[1]):
            for iz in range(n_axis[2]):
                center = lo + spacing * np.array([ix, iy, iz])
                member = np.flatnonzero(
                    np.linalg.norm(pts - center, axis=1) <= half)
                patch_idx += 1
                if len(member) < 8:
                    continue
                chosen = member
                if len(member) > cfg.N:
                    sub = derive_rng(0, "scene-patch", patch_idx)
                    chosen = member[sub.choice(len(member), size=cfg.N,
                                               replace=False)]
                patch = normalize_unit_sphere(PointCloud(pts[chosen]))
                _, fr, _ = forward_shape(checkpoint.params, patch,
                                         cfg.encoder_config(),
                                         attend=cfg.uses_attention())
                d = extract(fr)
                # unsampled members inherit their nearest sampled value
                dist = np.linalg.norm(pts[member][:, None, :] -
                                      pts[chosen][None, :, :], axis=2)
                nearest = np.argmin(dist, axis=1)
                sums[member] += d.values[nearest]
                counts[member] += 1.0
    got = counts > 0
    if not got.any():
        raise ValueError("no patch held at least 8 points")
    out = np.zeros(pc.n)
    out[got] = sums[got] / counts[got]
    rng_v = out[got]
    span = rng_v.max() - rng_v.min()
    if span <= 1e-12:
        return np.zeros(pc.n)
    out[got] = (out[got] - rng_v.min()) / span
    return out
