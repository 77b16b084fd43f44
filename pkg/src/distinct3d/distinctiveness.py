"""Per-point distinctiveness fields and their projection onto meshes."""

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, PointCloud
from .encoder import FeatureMatrix

REDUCTIONS = ("max", "mean", "l2", "top3")

_RANGE_EPS = 1e-12


@dataclass
class DistinctivenessField:
    """Min-max normalized per-point scores for one shape.

    A constant raw field carries no ordering; it maps to all zeros with
    the degenerate flag set instead of an arbitrary constant.
    """

    values: np.ndarray
    shape_id: str = ""
    degenerate: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("field values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        if self.degenerate:
            if np.any(self.values != 0.0):
                raise ValueError("degenerate field must be all zeros")
        else:
            lo = float(self.values.min())
            hi = float(self.values.max())
            if abs(lo) > 1e-9 or abs(hi - 1.0) > 1e-9:
                raise ValueError(
                    f"normalized field must span [0, 1], got [{lo}, {hi}]")

    @property
    def n(self) -> int:
        return len(self.values)


def _reduce_rows(values: np.ndarray, reduce: str) -> np.ndarray:
    if reduce == "max":
        return values.max(axis=1)
    if reduce == "mean":
        return values.mean(axis=1)
    if reduce == "l2":
        return np.linalg.norm(values, axis=1)
    if reduce == "top3":
        k = min(3, values.shape[1])
        part = np.partition(values, values.shape[1] - k, axis=1)
        return part[:, values.shape[1] - k:].mean(axis=1)
    raise ValueError(f"unknown reduction {reduce!r}, expected one of "
                     f"{REDUCTIONS}")


def _min_max(raw: np.ndarray):
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo <= _RANGE_EPS:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def extract(fr: FeatureMatrix, shape_id: str = "",
            reduce: str = "max") -> DistinctivenessField:
    """Channel reduction per point followed by per-shape min-max scaling."""
    if fr.stage != "refined":
        raise ValueError("extract expects refined features")
    raw = _reduce_rows(fr.values.astype(np.float64), reduce)
    d, degenerate = _min_max(raw)
    return DistinctivenessField(values=d, shape_id=shape_id,
                                degenerate=degenerate)


def project_to_mesh(mesh: Mesh, pc: PointCloud,
                    d: DistinctivenessField, k: int = 3) -> np.ndarray:
    """Inverse-distance blend of the k nearest sampled points per vertex,
    re-normalized to [0, 1] over the vertices."""
    if d.n != pc.n:
        raise ValueError("field length must match the sampled cloud")
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, pc.n)
    verts = mesh.vertices.astype(np.float64)
    pts = pc.points.astype(np.float64)
    out = np.empty(len(verts), dtype=np.float64)
    for i, v in enumerate(verts):
        dist = np.linalg.norm(pts - v, axis=1)
        idx = np.argsort(dist, kind="stable")[:k]
        nd = dist[idx]
        if nd[0] <= 1e-12:
            out[i] = d.values[idx[0]]
            continue
        w = 1.0 / nd
        out[i] = float(np.dot(w, d.values[idx]) / w.sum())
    vals, _ = _min_max(out)
    return vals


def threshold_regions(pc: PointCloud, d: DistinctivenessField,
                      d_t: float) -> np.ndarray:
    """Indices of points scoring strictly above the threshold."""
    if not 0.0 <= d_t < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    if d.n != pc.n:
        raise ValueError("field length must match the cloud")
    return np.flatnonzero(d.values > d_t)
