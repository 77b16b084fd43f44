"""Coverage matching, error rates, preference downsampling, retention."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .encoder import forward_shape
from .distinctiveness import extract
from .pipeline import assign_cloud, canonical_view

SCORE_FLOOR = 1e-3

DOWNSAMPLE_MODES = ("distinctiveness", "curvature", "random")


@dataclass
class CoverageResult:
    n_covered: int
    pairs: list
    r: float
    D: float

    def __post_init__(self):
        if self.n_covered != len(self.pairs):
            raise ValueError("covered count must equal the pair count")


@dataclass
class RegionAnnotationSet:
    """Human-marked regions per annotator plus detected regions, all as
    (k, 3) point arrays."""

    annotator_regions: list = field(default_factory=list)
    detected_regions: list = field(default_factory=list)

    def __post_init__(self):
        for regions in self.annotator_regions:
            for reg in regions:
                if len(np.asarray(reg)) == 0:
                    raise ValueError("annotated regions must be nonempty")
        for reg in self.detected_regions:
            if len(np.asarray(reg)) == 0:
                raise ValueError("detected regions must be nonempty")


def match_coverage(q_hat, q, r: float, D: float) -> CoverageResult:
    """One-to-one matching of detected points to ground truth within r*D.

    Deterministic two-phase construction: a nearest-first greedy pass
    (ties by index; a pair is taken only while the detected point's
    nearest still-unmatched ground-truth point is exactly this one),
    then augmenting-path completion so the covered count always equals
    the maximum matching of the tolerance graph.
    """
    if r < 0.0:
        raise ValueError("tolerance ratio must be nonnegative")
    if D <= 0.0:
        raise ValueError("diameter must be positive")
    q_hat = np.asarray(q_hat, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(q_hat) == 0 or len(q) == 0:
        return CoverageResult(n_covered=0, pairs=[], r=r, D=D)
    dist = np.linalg.norm(q_hat[:, None, :] - q[None, :, :], axis=2)
    limit = r * D
    cand = [(dist[i, j], i, j)
            for i in range(len(q_hat)) for j in range(len(q))
            if dist[i, j] <= limit]
    cand.sort()
    hat_of = {}  # ground-truth index -> detected index
    q_of = {}
    for d_ij, i, j in cand:
        if i in hat_of or j in q_of:
            continue
        col = np.where([k in hat_of for k in range(len(q_hat))],
                       np.inf, dist[:, j])
        best = int(np.argmin(col))  # argmin takes the lowest index on ties
        if best != i:
            continue
        hat_of[i] = j
        q_of[j] = i

    # single-pass greediness can strand matchable pairs; alternate-path
    # augmentation restores maximum cardinality without losing determinism
    neighbors = [[] for _ in range(len(q))]
    for d_ij, i, j in cand:
        neighbors[j].append(i)

    def try_augment(j, seen):
        for i in neighbors[j]:
            if i in seen:
                continue
            seen.add(i)
            if i not in hat_of or try_augment(hat_of[i], seen):
                hat_of[i] = j
                q_of[j] = i
                return True
        return False

    for j in range(len(q)):
        if j not in q_of:
            try_augment(j, set())
    pairs = sorted((i, j) for i, j in hat_of.items())
    return CoverageResult(n_covered=len(pairs), pairs=pairs, r=r, D=D)


def fne_fpe(q_hat, q, r: float, D: float):
    """False-negative and false-positive rates of a detection against
    ground truth under the r*D tolerance."""
    q_hat = np.asarray(q_hat, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(q_hat) == 0 or len(q) == 0:
        raise ValueError("error rates need nonempty point sets")
    cov = match_coverage(q_hat, q, r, D)
    fne = 1.0 - cov.n_covered / len(q_hat)
    fpe = 1.0 - cov.n_covered / len(q)
    return fne, fpe


def _centroids(regions):
    return np.stack([np.asarray(reg, dtype=np.float64).reshape(-1, 3)
                     .mean(axis=0) for reg in regions])


def wme_from_counts(covered, totals) -> float:
    covered = np.asarray(covered, dtype=np.int64)
    totals = np.asarray(totals, dtype=np.int64)
    if len(totals) == 0 or totals.sum() <= 0:
        raise ValueError("weighted miss error needs annotated regions")
    if np.any(covered > totals) or np.any(covered < 0):
        raise ValueError("covered counts must lie in [0, total]")
    return 1.0 - float(covered.sum()) / float(totals.sum())


def wme(annotations: RegionAnnotationSet, r: float, D: float) -> float:
    """Pooled miss rate of detected regions against every annotator.

    Region-level coverage applies the point rule to region centroids.
    """
    if len(annotations.annotator_regions) == 0:
        raise ValueError("weighted miss error needs at least one annotator")
    det = (_centroids(annotations.detected_regions)
           if annotations.detected_regions else np.zeros((0, 3)))
    covered, totals = [], []
    for regions in annotations.annotator_regions:
        if len(regions) == 0:
            covered.append(0)
            totals.append(0)
            continue
        marked = _centroids(regions)
        cov = match_coverage(marked, det, r, D)
        covered.append(cov.n_covered)
        totals.append(len(regions))
    return wme_from_counts(covered, totals)


def downsample_indices(pc: PointCloud, scores, K: int,
                       rng: np.random.Generator) -> np.ndarray:
    """K row indices drawn without replacement, probability proportional
    to score plus a floor; returned in ascending order so the relative
    order of survivors is preserved."""
    if not 1 <= K <= pc.n:
        raise ValueError(f"budget must be in [1, {pc.n}]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (pc.n,):
        raise ValueError("scores must be one per point")
    if np.any(scores < 0.0):
        raise ValueError("scores must be nonnegative")
    p = scores + SCORE_FLOOR
    p = p / p.sum()
    idx = rng.choice(pc.n, size=K, replace=False, p=p)
    return np.sort(idx)


def downsample_with_preference(pc: PointCloud, d, curvature, mode: str,
                               K: int, rng: np.random.Generator):
    """(PointCloud, kept indices) under the requested preference mode."""
    if mode == "distinctiveness":
        scores = np.asarray(d.values if hasattr(d, "values") else d,
                            dtype=np.float64)
    elif mode == "curvature":
        scores = np.asarray(curvature, dtype=np.float64)
    elif mode == "random":
        scores = np.ones(pc.n, dtype=np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}, expected one of "
                         f"{DOWNSAMPLE_MODES}")
    idx = downsample_indices(pc, scores, K, rng)
    sub = PointCloud(pc.points[idx], shape_id=pc.shape_id)
    return sub, idx


def cluster_retention(checkpoint, dataset, budgets, modes,
                      rng: np.random.Generator):
    """Fraction of shapes whose cluster assignment survives downsampling.

    Returns {(mode, K): accuracy}. Every mode draws from its own spawn of
    the supplied generator so adding a mode never perturbs the others.
    """
    cfg = checkpoint.config
    full_assign = {}
    fields = {}
    curvatures = {}
    views = {}
    for rec in dataset.records:
        view = canonical_view(rec, cfg.N)
        views[rec.shape_id] = view
        full_assign[rec.shape_id] = assign_cloud(checkpoint, view)
        _, fr, _ = forward_shape(checkpoint.params, view,
                                 cfg.encoder_config(),
                                 attend=cfg.uses_attention())
        fields[rec.shape_id] = extract(fr, shape_id=rec.shape_id)
        curvatures[rec.shape_id] = _curvature_proxy(view)
    out = {}
    streams = {mode: rng.spawn(1)[0] for mode in modes}
    for mode in modes:
        for K in budgets:
            if K > cfg.N:
                raise ValueError("budget exceeds the working point count")
            hits = 0
            for rec in dataset.records:
                view = views[rec.shape_id]
                sub, _ = downsample_with_preference(
                    view, fields[rec.shape_id], curvatures[rec.shape_id],
                    mode, K, streams[mode])
                if assign_cloud(checkpoint, sub) == full_assign[rec.shape_id]:
                    hits += 1
            out[(mode, K)] = hits / len(dataset.records)
    return out


def _curvature_proxy(pc: PointCloud, k: int = 16) -> np.ndarray:
    """Smallest-eigenvalue fraction of the local covariance: flat → 0."""
    pts = pc.points.astype(np.float64)
    k = min(k, pc.n)
    d = np.linalg.norm(pts[None, :, :] - pts[:, None, :], axis=2)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    out = np.empty(pc.n)
    for i in range(pc.n):
        local = pts[nn[i]] - pts[nn[i]].mean(axis=0)
        w = np.linalg.eigvalsh(local.T @ local)
        tot = float(w.sum())
        out[i] = float(w[0]) / tot if tot > 0 else 0.0
    return out


def best_permutation_accuracy(pred, true, C: int) -> float:
    """Max agreement over all label permutations; exhaustive, so C ≤ 8."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("label arrays must have matching length")
    if C > 8:
        raise ValueError("exhaustive permutation search capped at C = 8")
    if np.any((pred < 0) | (pred >= C)) or np.any((true < 0) | (true >= C)):
        raise ValueError("labels outside [0, C)")
    best = 0.0
    for perm in itertools.permutations(range(C)):
        mapped = np.asarray(perm)[pred]
        best = max(best, float((mapped == true).mean()))
    return best


def adjusted_rand_index(pred, true) -> float:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("label arrays must have matching length")
    n = len(pred)
    if n == 0:
        raise ValueError("empty labelings")
    pu, pi = np.unique(pred, return_inverse=True)
    tu, ti = np.unique(true, return_inverse=True)
    table = np.zeros((len(pu), len(tu)), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
