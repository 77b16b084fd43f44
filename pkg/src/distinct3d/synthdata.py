"""Procedural shape families: a shared winged body plus per-family pods.

Every family uses the same base hull (ellipsoid fuselage, wing slab, tail
fin); families differ only in how many spherical pods they carry and where.
Pod placements keep a positive clearance from the hull so pod samples are
geometrically separable from body samples, which downstream evaluation
relies on. All randomness flows through explicit generators.
"""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Mesh, PointCloud, clip_norm, surface_sample_with_faces
from .seeds import derive_rng


@dataclass(frozen=True)
class BodyParams:
    """Dimensions of the hull shared by all families."""

    semi_axes: tuple = (1.0, 0.22, 0.22)
    wing_x: tuple = (-0.15, 0.25)
    wing_y: tuple = (-1.0, 1.0)
    wing_z: tuple = (-0.03, 0.03)
    fin_x: tuple = (-0.95, -0.7)
    fin_y: tuple = (-0.02, 0.02)
    fin_z: tuple = (0.0, 0.3)
    pod_radius: float = 0.15

    def bounding_box(self):
        lo = np.minimum.reduce([
            [-self.semi_axes[0], -self.semi_axes[1], -self.semi_axes[2]],
            [self.wing_x[0], self.wing_y[0], self.wing_z[0]],
            [self.fin_x[0], self.fin_y[0], self.fin_z[0]],
        ])
        hi = np.maximum.reduce([
            [self.semi_axes[0], self.semi_axes[1], self.semi_axes[2]],
            [self.wing_x[1], self.wing_y[1], self.wing_z[1]],
            [self.fin_x[1], self.fin_y[1], self.fin_z[1]],
        ])
        return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-instance jitter ranges; kept small so clearances survive."""

    placement_jitter: float = 0.01
    radius_jitter: float = 0.005
    stretch_range: tuple = (0.95, 1.05)


@dataclass(frozen=True)
class ShapeFamilySpec:
    family_name: str
    pod_count: int
    pod_placement: tuple
    body_params: BodyParams = field(default_factory=BodyParams)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.pod_count < 0:
            raise ValueError("pod_count must be >= 0")
        if len(self.pod_placement) != self.pod_count:
            raise ValueError("pod_placement length must equal pod_count")
        lo, hi = self.body_params.bounding_box()
        for p in self.pod_placement:
            p = np.asarray(p, dtype=np.float64)
            if (p < 2.0 * lo).any() or (p > 2.0 * hi).any():
                raise ValueError(
                    f"pod placement {p.tolist()} outside twice the hull box")


@dataclass
class DatasetRecord:
    shape_id: str
    family_name: str
    mesh: Mesh
    master_cloud: PointCloud
    substructure_mask: np.ndarray

    def __post_init__(self):
        self.substructure_mask = np.asarray(self.substructure_mask, dtype=bool)
        if len(self.substructure_mask) != self.master_cloud.n:
            raise ValueError("mask length must match master cloud size")


@dataclass
class Dataset:
    records: list
    N: int

    def __post_init__(self):
        if len(self.records) < 2:
            raise ValueError("a dataset needs at least two records")
        if self.N < 1:
            raise ValueError("N must be positive")

    def digest(self) -> str:
        h = hashlib.blake2s()
        for r in self.records:
            h.update(r.shape_id.encode())
            h.update(r.family_name.encode())
            h.update(np.ascontiguousarray(r.master_cloud.points).tobytes())
            h.update(np.ascontiguousarray(r.substructure_mask).tobytes())
        h.update(str(self.N).encode())
        return h.hexdigest()


_ICO_CACHE = {}


def _icosphere(subdivisions: int):
    """Unit icosphere (vertices, faces); cached per subdivision level."""
    if subdivisions in _ICO_CACHE:
        return _ICO_CACHE[subdivisions]
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts = verts.tolist()
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = np.asarray(verts[a]) + np.asarray(verts[b])
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m.tolist())
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc],
                          [ab, bc, ca]]
        verts = np.asarray(verts, dtype=np.float64)
        faces = np.asarray(new_faces, dtype=np.int64)
    _ICO_CACHE[subdivisions] = (verts, faces)
    return verts, faces


_BOX_FACES = np.array([
    [0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6],
    [0, 4, 5], [0, 5, 1], [3, 2, 6], [3, 6, 7],
    [0, 3, 7], [0, 7, 4], [1, 5, 6], [1, 6, 2],
], dtype=np.int64)


def _box(xr, yr, zr):
    x0, x1 = xr
    y0, y1 = yr
    z0, z1 = zr
    verts = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ], dtype=np.float64)
    return verts, _BOX_FACES.copy()


def _point_box_distance(p, xr, yr, zr):
    lo = np.array([xr[0], yr[0], zr[0]])
    hi = np.array([xr[1], yr[1], zr[1]])
    d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return float(np.linalg.norm(d))


def _clearances_ok(body: BodyParams, centers, radii, margin=0.005) -> bool:
    """Conservative disjointness test for pods against hull and each other."""
    a, b, c = body.semi_axes
    inv = np.array([1.0 / a, 1.0 / b, 1.0 / c])
    inflate = max(inv)
    for i, (p, r) in enumerate(zip(centers, radii)):
        # pod sphere maps inside a ball of radius r*max(1/axes) after the
        # transform that turns the hull ellipsoid into the unit sphere
        if np.linalg.norm(p * inv) <= 1.0 + r * inflate + margin:
            return False
        if _point_box_distance(p, body.wing_x, body.wing_y,
                               body.wing_z) <= r + margin:
            return False
        if _point_box_distance(p, body.fin_x, body.fin_y,
                               body.fin_z) <= r + margin:
            return False
        for j in range(i):
            if np.linalg.norm(p - centers[j]) <= r + radii[j] + margin:
                return False
    return True


def _assemble(body: BodyParams, centers, radii, stretch_y):
    verts_list, faces_list, offset = [], [], 0

    def push(v, f):
        nonlocal offset
        verts_list.append(v)
        faces_list.append(f + offset)
        offset += len(v)

    ev, ef = _icosphere(2)
    push(ev * np.asarray(body.semi_axes), ef)
    push(*_box(body.wing_x, body.wing_y, body.wing_z))
    push(*_box(body.fin_x, body.fin_y, body.fin_z))
    pod_face_start = sum(len(f) for f in faces_list)
    pv, pf = _icosphere(1)
    for p, r in zip(centers, radii):
        push(pv * r + np.asarray(p), pf)
    verts = np.concatenate(verts_list)
    verts[:, 1] *= stretch_y
    return Mesh(verts, np.concatenate(faces_list)), pod_face_start


MAX_GENERATION_RETRIES = 50


def generate_family(spec: ShapeFamilySpec, count: int,
                    rng: np.random.Generator, n_master: int = 1024):
    """Generate `count` records; each mesh and master cloud share one frame.

    The master cloud is sampled from the mesh and then both are normalized
    together (cloud centroid to origin, cloud max radius to one) so mesh
    projection stays valid after training on normalized clouds.
    """
    records = []
    streams = rng.spawn(count)
    for i, sub in enumerate(streams):
        noise = spec.noise
        placements = np.asarray(spec.pod_placement,
                                dtype=np.float64).reshape(spec.pod_count, 3)
        for attempt in range(MAX_GENERATION_RETRIES):
            centers = placements + sub.uniform(
                -noise.placement_jitter, noise.placement_jitter,
                size=placements.shape)
            radii = spec.body_params.pod_radius + sub.uniform(
                -noise.radius_jitter, noise.radius_jitter,
                size=spec.pod_count)
            stretch = float(sub.uniform(*noise.stretch_range))
            if _clearances_ok(spec.body_params, centers, radii):
                break
        else:
            raise ValueError(
                f"could not place pods for {spec.family_name!r} without "
                f"overlap after {MAX_GENERATION_RETRIES} retries")
        mesh, pod_face_start = _assemble(spec.body_params, centers, radii,
                                         stretch)
        cloud, face_idx = surface_sample_with_faces(mesh, n_master, sub)
        mask = face_idx >= pod_face_start
        center = cloud.points.mean(axis=0)
        scale = np.linalg.norm(cloud.points - center, axis=1).max()
        pts = (cloud.points - center) / scale
        mesh = Mesh((mesh.vertices - center) / scale, mesh.faces)
        shape_id = f"{spec.family_name}-{i:03d}"
        records.append(DatasetRecord(
            shape_id=shape_id,
            family_name=spec.family_name,
            mesh=mesh,
            master_cloud=PointCloud(pts, shape_id=shape_id),
            substructure_mask=mask,
        ))
    return records


def build_dataset(specs, N: int, seed: int) -> Dataset:
    """Assemble a shuffled dataset; master clouds carry 4*N points each."""
    total = sum(count for _, count in specs)
    if total < 2:
        raise ValueError("dataset needs at least two shapes")
    records = []
    for spec, count in specs:
        fam_rng = derive_rng(seed, "family", spec.family_name)
        records.extend(generate_family(spec, count, fam_rng, n_master=4 * N))
    order = derive_rng(seed, "shuffle").permutation(len(records))
    return Dataset(records=[records[i] for i in order], N=N)


def resample_view(record: DatasetRecord, N: int, rng: np.random.Generator,
                  jitter_sigma: float = 0.01,
                  jitter_clip: float = 0.05) -> PointCloud:
    """Draw N master points without replacement and jitter them slightly.

    Different streams give different concrete clouds for the same shape;
    the same stream reproduces the cloud exactly.
    """
    master = record.master_cloud
    if N > master.n:
        raise ValueError(f"cannot draw {N} points from a master cloud of "
                         f"{master.n}")
    idx = rng.choice(master.n, size=N, replace=False)
    pts = master.points[idx]
    if jitter_sigma > 0.0:
        noise = clip_norm(rng.normal(0.0, jitter_sigma, size=pts.shape),
                          jitter_clip)
        pts = pts + noise
    return PointCloud(pts, shape_id=record.shape_id)


def resample_view_indices(record: DatasetRecord, N: int,
                          rng: np.random.Generator):
    """Index-only variant: which master rows a view would draw."""
    if N > record.master_cloud.n:
        raise ValueError("view larger than master cloud")
    return rng.choice(record.master_cloud.n, size=N, replace=False)


def twin_pod_spec() -> ShapeFamilySpec:
    return ShapeFamilySpec(
        family_name="twin-pod",
        pod_count=2,
        pod_placement=((0.05, -0.5, -0.22), (0.05, 0.5, -0.22)),
    )


def quad_pod_spec() -> ShapeFamilySpec:
    return ShapeFamilySpec(
        family_name="quad-pod",
        pod_count=4,
        pod_placement=((0.05, -0.7, -0.22), (0.05, -0.35, -0.22),
                       (0.05, 0.35, -0.22), (0.05, 0.7, -0.22)),
    )


def tail_pod_spec() -> ShapeFamilySpec:
    return ShapeFamilySpec(
        family_name="tail-pod",
        pod_count=2,
        pod_placement=((-0.8, -0.35, 0.08), (-0.8, 0.35, 0.08)),
    )


PRESETS = {
    "twin-vs-quad": (twin_pod_spec, quad_pod_spec),
    "quad-vs-tail": (quad_pod_spec, tail_pod_spec),
}


def build_preset_dataset(preset: str, count_per_family: int, N: int,
                         seed: int) -> Dataset:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; "
                         f"choose from {sorted(PRESETS)}")
    specs = [(make(), count_per_family) for make in PRESETS[preset]]
    return build_dataset(specs, N=N, seed=seed)
