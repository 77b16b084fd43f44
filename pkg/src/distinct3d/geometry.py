"""Point-cloud and mesh primitives shared by every other module.

Clouds are plain (N, 3) float64 arrays wrapped with a shape id. All
operations are pure given explicit RNG streams.
"""

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class PointCloud:
    """An ordered set of 3D points sampled from one shape."""

    points: np.ndarray  # (N, 3)
    shape_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class Mesh:
    """Triangle mesh: (V, 3) vertices and (F, 3) vertex-index faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class AugmentConfig:
    """Ranges for on-the-fly augmentation: rotate, scale, shift, jitter.

    The magnitudes are configuration; zeroing every range makes augment()
    the identity. Jitter clipping bounds the per-point displacement norm.
    """

    rotation_max: float = 2.0 * np.pi  # spin about the z (up) axis
    tilt_max_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    shift_max: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_max=0.0, tilt_max_deg=0.0, scale_min=1.0,
                   scale_max=1.0, shift_max=0.0, jitter_sigma=0.0,
                   jitter_clip=0.0)


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    Idempotent and order-preserving. Rejects degenerate clouds whose points
    all coincide (zero scale).
    """
    pts = pc.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = np.linalg.norm(centered, axis=1).max()
    if radius <= 0.0:
        raise ValueError("cannot normalize: all points coincide")
    return replace(pc, points=centered / radius)


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues formula
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def clip_norm(vectors: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale rows of `vectors` down so each row norm is at most max_norm."""
    if max_norm <= 0.0:
        return np.zeros_like(vectors)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return vectors * factor


def augment(pc: PointCloud, rng: np.random.Generator,
            cfg: AugmentConfig = None) -> PointCloud:
    """Apply rotation, scale, and shift, then clipped per-point jitter.

    Draw order is fixed (spin, tilt axis, tilt angle, scale, shift, jitter)
    so the same stream always produces the same transform.
    """
    if cfg is None:
        cfg = AugmentConfig()
    pts = pc.points

    theta = rng.uniform(0.0, cfg.rotation_max) if cfg.rotation_max > 0 else 0.0
    phi = rng.uniform(0.0, 2.0 * np.pi)
    psi = rng.uniform(0.0, np.deg2rad(cfg.tilt_max_deg)) if cfg.tilt_max_deg > 0 else 0.0
    R = _rotation_z(theta)
    if psi > 0.0:
        tilt_axis = np.array([np.cos(phi), np.sin(phi), 0.0])
        R = _rotation_about_axis(tilt_axis, psi) @ R

    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    shift = rng.uniform(-cfg.shift_max, cfg.shift_max, size=3) if cfg.shift_max > 0 else np.zeros(3)

    out = scale * (pts @ R.T) + shift
    if cfg.jitter_sigma > 0.0:
        jitter = rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
        out = out + clip_norm(jitter, cfg.jitter_clip)
    return replace(pc, points=out)


def farthest_point_sample(pc: PointCloud, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of k point indices, deterministic given start.

    Ties in the max-min distance resolve to the lowest index.
    """
    pts = pc.points
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


class NeighborGrid:
    """Uniform grid hash over a cloud for fixed-radius ball queries.

    Cell size equals the query radius, so candidates live in the 27
    neighboring cells. A brute-force reference path (`radius_query_brute`)
    is kept for tests.
    """

    def __init__(self, points: np.ndarray, radius: float):
        if radius <= 0.0:
            raise ValueError("radius must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.radius = float(radius)
        self.origin = self.points.min(axis=0)
        cells = np.floor((self.points - self.origin) / radius).astype(np.int64)
        self._cells: dict = {}
        for idx, key in enumerate(map(tuple, cells)):
            self._cells.setdefault(key, []).append(idx)

    def query(self, center: np.ndarray, max_k: int) -> np.ndarray:
        """Indices within radius of center, nearest first, up to max_k.

        Falls back to the single nearest point when the ball is empty, so a
        query point always has a neighborhood.
        """
        center = np.asarray(center, dtype=np.float64)
        cx, cy, cz = np.floor((center - self.origin) / self.radius).astype(np.int64)
        candidates = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    bucket = self._cells.get((cx + dx, cy + dy, cz + dz))
                    if bucket:
                        candidates.extend(bucket)
        if candidates:
            cand = np.array(candidates, dtype=np.int64)
            d = np.linalg.norm(self.points[cand] - center, axis=1)
            inside = d <= self.radius
            if inside.any():
                cand, d = cand[inside], d[inside]
                order = np.lexsort((cand, d))
                return cand[order][:max_k]
        # empty ball: nearest single point over the whole cloud
        d_all = np.linalg.norm(self.points - center, axis=1)
        return np.array([np.lexsort((np.arange(len(d_all)), d_all))[0]])


def radius_query(pc: PointCloud, center: np.ndarray, r: float,
                 max_k: int) -> np.ndarray:
    """Ball query: indices with distance <= r, sorted by distance, <= max_k."""
    return NeighborGrid(pc.points, r).query(center, max_k)


def radius_query_brute(pc: PointCloud, center: np.ndarray, r: float,
                       max_k: int) -> np.ndarray:
    """O(N) reference implementation of radius_query for tests."""
    d = np.linalg.norm(pc.points - np.asarray(center, dtype=np.float64), axis=1)
    idx = np.flatnonzero(d <= r)
    if idx.size == 0:
        return np.array([np.lexsort((np.arange(len(d)), d))[0]])
    order = np.lexsort((idx, d[idx]))
    return idx[order][:max_k]


def ball_neighborhoods(points: np.ndarray, centers: np.ndarray, r: float,
                       max_k: int) -> np.ndarray:
    """Ball query for many centers at once.

    Returns an (n_centers, max_k) index matrix padded by repeating each
    row's nearest neighbor; padding duplicates are harmless under max-pool.
    Small problems take a dense vectorized path; large ones fall back to
    the grid hash. Both order candidates by (distance, index).
    """
    n, m = len(points), len(centers)
    if n * m <= 4_000_000:
        d = np.linalg.norm(points[None, :, :] - centers[:, None, :], axis=2)
        # stable sort on distance keeps index order for exact ties
        order = np.argsort(d, axis=1, kind="stable")
        d_sorted = np.take_along_axis(d, order, axis=1)
        out = np.empty((m, max_k), dtype=np.int64)
        for i in range(m):
            k_in = int(np.searchsorted(d_sorted[i], r, side="right"))
            row = order[i, : max(k_in, 1)][:max_k]
            out[i, : len(row)] = row
            if len(row) < max_k:
                out[i, len(row):] = row[0]
        return out
    grid = NeighborGrid(points, r)
    out = np.empty((m, max_k), dtype=np.int64)
    for i, c in enumerate(centers):
        idx = grid.query(c, max_k)
        out[i, :len(idx)] = idx
        if len(idx) < max_k:
            out[i, len(idx):] = idx[0]
    return out


def estimate_curvature(pc: PointCloud, k: int = 16) -> np.ndarray:
    """Surface-variation curvature score per point, min-max scaled to [0, 1].

    The raw score is lambda0 / (lambda0 + lambda1 + lambda2) from a local
    PCA over the k nearest neighbors (self included), which lives in
    [0, 1/3]; a flat neighborhood scores 0. A constant raw field collapses
    to all zeros.
    """
    if k < 4:
        raise ValueError("curvature estimation needs k >= 4")
    pts = pc.points
    n = pts.shape[0]
    k = min(k, n)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    raw = np.zeros(n)
    for i in range(n):
        nbr = np.argsort(d2[i], kind="stable")[:k]
        local = pts[nbr] - pts[nbr].mean(axis=0)
        cov = local.T @ local / len(nbr)
        evals = np.linalg.eigvalsh(cov)
        total = evals.sum()
        raw[i] = evals[0] / total if total > 1e-18 else 0.0
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.zeros(n)
    return (raw - lo) / (hi - lo)


def bounding_sphere_diameter(pc: PointCloud) -> float:
    """Diameter of the centroid-centered bounding sphere.

    Approximation: 2x the max distance from the centroid, not the minimal
    enclosing sphere; adequate at the tolerance scales used here.
    """
    centered = pc.points - pc.points.mean(axis=0)
    return 2.0 * float(np.linalg.norm(centered, axis=1).max())


def surface_sample(mesh: Mesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Sample n points uniformly by area from the mesh surface."""
    pts, _ = surface_sample_with_faces(mesh, n, rng)
    return pts


def surface_sample_with_faces(mesh: Mesh, n: int,
                              rng: np.random.Generator):
    """Like surface_sample, but also returns the source face index per point."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero total surface area")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(points=pts), face_idx
