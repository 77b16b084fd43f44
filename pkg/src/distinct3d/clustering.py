"""Per-shape feature memory and its epoch-level clustering machinery.

The bank holds one unit-norm global feature per shape. Each epoch the
bank is re-clustered: a cosine-gap affinity feeds a symmetric normalized
Laplacian, the smallest eigenvectors (cyclic Jacobi) give a spectral
embedding, and seeded k-means++ labels the rows. Cluster prototypes are
normalized member means; they are recomputed after clustering and then
held fixed until the next epoch.

Labels are canonicalized by the lexicographic order of the embedding
centroids, so equal partitions get equal label vectors regardless of row
order.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .seeds import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralConfig:
    sigma: float = 0.5
    jacobi_tol: float = 1e-10
    kmeans_restarts: int = 8
    kmeans_seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.kmeans_restarts < 1:
            raise ValueError("need at least one k-means restart")


@dataclass
class MemoryBank:
    bank: np.ndarray
    assignments: np.ndarray
    prototypes: np.ndarray
    C: int
    shape_ids: list
    epoch: int = 0

    def index_of(self, shape_id: str) -> int:
        try:
            return self._index[shape_id]
        except AttributeError:
            self._index = {sid: i for i, sid in enumerate(self.shape_ids)}
            return self._index[shape_id]

    def check_invariants(self, atol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.bank.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > atol:
            raise AssertionError("bank row norms drifted from one")
        pnorms = np.linalg.norm(self.prototypes.astype(np.float64), axis=1)
        if np.abs(pnorms - 1.0).max() > atol:
            raise AssertionError("prototype norms drifted from one")
        if ((self.assignments < 0) | (self.assignments >= self.C)).any():
            raise AssertionError("assignment outside [0, C)")
        if len(self.shape_ids) != len(self.bank):
            raise AssertionError("shape id list out of sync with bank")


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues ascending, eigenvectors as columns). Converges
    when the off-diagonal Frobenius norm drops below tol.
    """
    a = np.asarray(a, dtype=np.float64).copy()
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("jacobi_eigh expects a symmetric matrix")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol:
            break
        small = tol / max(n, 1)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= small:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) if theta != 0.0 else 1.0
                t = t / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        log.warning("jacobi sweep budget exhausted; off-diagonal %.3g",
                    float(np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))))
    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order], v[:, order]


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator):
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dists, axis=1)
        moved = 0.0
        for j in range(k):
            members = x[labels == j]
            if len(members) == 0:
                # revive on the point farthest from its current centroid
                far = int(np.argmax(dists[np.arange(n), labels]))
                new_c = x[far]
                labels[far] = j
            else:
                new_c = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new_c - centroids[j])))
            centroids[j] = new_c
        if moved < 1e-6:
            break
    dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dists, axis=1)
    wcss = float(dists[np.arange(n), labels].sum())
    return labels, wcss


def kmeans(x: np.ndarray, k: int, seed: int = 0,
           restarts: int = 8) -> np.ndarray:
    """Best-of-restarts seeded k-means++; deterministic given seed."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ValueError("k must be in [1, rows]")
    best_labels, best_wcss = None, np.inf
    for r in range(restarts):
        labels, wcss = _kmeans_once(x, k, derive_rng(seed, "kmeans", r))
        if wcss < best_wcss:
            best_labels, best_wcss = labels, wcss
    return best_labels


def _canonical_labels(labels: np.ndarray, x: np.ndarray,
                      k: int) -> np.ndarray:
    """Relabel clusters by lexicographic order of their centroids so the
    labeling does not depend on row order.

    Near-coincident centroids make the order sensitive to tiny feature
    shifts, so epoch-over-epoch label diffs can include whole-label swaps
    while the underlying partition is steady; consumers needing
    partition-level diffs should align labels by best permutation first.
    """
    centroids = np.zeros((k, x.shape[1]))
    present = []
    for j in range(k):
        members = x[labels == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
            present.append(j)
    order = sorted(present, key=lambda j: tuple(centroids[j]))
    remap = {old: new for new, old in enumerate(order)}
    nxt = len(order)
    for j in range(k):
        if j not in remap:
            remap[j] = nxt
            nxt += 1
    return np.asarray([remap[int(l)] for l in labels], dtype=np.int64)


def spectral_cluster(bank: np.ndarray, c: int,
                     cfg: SpectralConfig = SpectralConfig()) -> np.ndarray:
    """Cluster unit-norm rows through the normalized-Laplacian embedding."""
    bank = np.asarray(bank, dtype=np.float64)
    n = len(bank)
    if c > n:
        raise ValueError("more clusters than rows")
    if c == 1:
        return np.zeros(n, dtype=np.int64)
    cos = np.clip(bank @ bank.T, -1.0, 1.0)
    a = np.exp(-(1.0 - cos) / cfg.sigma)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    connected = deg > 0.0
    if connected.sum() < c:
        # pathological underflow case: cluster raw rows directly
        labels = kmeans(bank, c, seed=cfg.kmeans_seed,
                        restarts=cfg.kmeans_restarts)
        return _canonical_labels(labels, bank, c)
    sub = a[np.ix_(connected, connected)]
    dsub = deg[connected]
    inv_sqrt = 1.0 / np.sqrt(dsub)
    lap = np.eye(len(sub)) - inv_sqrt[:, None] * sub * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    _, vecs = jacobi_eigh(lap, tol=cfg.jacobi_tol)
    emb = vecs[:, :c]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.maximum(norms, 1e-12)
    sub_labels = kmeans(emb, c, seed=cfg.kmeans_seed,
                        restarts=cfg.kmeans_restarts)
    sub_labels = _canonical_labels(sub_labels, emb, c)
    labels = np.empty(n, dtype=np.int64)
    labels[connected] = sub_labels
    if not connected.all():
        protos = compute_prototypes(bank[connected], sub_labels, c)
        for i in np.flatnonzero(~connected):
            labels[i] = int(np.argmax(protos @ bank[i]))
        log.warning("%d zero-degree rows assigned by nearest prototype",
                    int((~connected).sum()))
    return labels


def compute_prototypes(bank: np.ndarray, assignments, c: int) -> np.ndarray:
    """Unit-norm member means; an empty cluster gets a data-seeded random
    direction (logged)."""
    bank = np.asarray(bank, dtype=np.float64)
    y = np.asarray(assignments, dtype=np.int64)
    protos = np.zeros((c, bank.shape[1]))
    for k in range(c):
        members = bank[y == k]
        if len(members) == 0:
            digest = hashlib.blake2s(bank.tobytes(),
                                     digest_size=4).hexdigest()
            rng = derive_rng(int(digest, 16), "proto-fallback", k)
            v = rng.normal(size=bank.shape[1])
            protos[k] = v / np.linalg.norm(v)
            log.warning("cluster %d empty; prototype resampled", k)
            continue
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            protos[k] = np.eye(bank.shape[1])[0]
        else:
            protos[k] = mean / norm
    return protos


def init_bank(n_obj: int, m: int, c: int, rng: np.random.Generator,
              shape_ids=None,
              cfg: SpectralConfig = SpectralConfig()) -> MemoryBank:
    """Random unit features, then a first cluster + prototype pass."""
    if c < 1:
        raise ValueError("need at least one cluster")
    if n_obj < c:
        raise ValueError("fewer shapes than clusters")
    feats = rng.normal(size=(n_obj, m))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    if shape_ids is None:
        shape_ids = [f"shape-{i:04d}" for i in range(n_obj)]
    if len(shape_ids) != n_obj:
        raise ValueError("shape id count mismatch")
    assignments = spectral_cluster(feats, c, cfg)
    prototypes = compute_prototypes(feats, assignments, c)
    return MemoryBank(bank=feats, assignments=assignments,
                      prototypes=prototypes, C=c,
                      shape_ids=list(shape_ids), epoch=0)


def bank_update(mb: MemoryBank, shape_id: str, g) -> None:
    """Replace one shape's stored feature; direct replacement, no blending."""
    from .encoder import GlobalFeature
    if isinstance(g, GlobalFeature):
        g = g.vector
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"bank features must be unit norm, got {norm}")
    try:
        row = mb.index_of(shape_id)
    except KeyError:
        raise ValueError(f"unknown shape {shape_id!r}")
    mb.bank[row] = g
