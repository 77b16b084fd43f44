"""Loss terms for distinctiveness training.

The cluster term scores each global feature against per-cluster prototype
directions under a temperature softmax; the contrastive term pulls a shape
toward a fresh resampling of itself and pushes it a margin away from a
shape in another cluster; a small quadratic penalty keeps weights bounded.
Prototypes are targets, never parameters: no gradient flows into them.

Everything here is a pure function returning (value, gradients) pairs in
plain numpy; the training loop stitches the gradients into the encoder
backward pass.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .encoder import GlobalFeature
from .geometry import PointCloud
from .synthdata import resample_view

log = logging.getLogger(__name__)

TAU_DEFAULT = 0.07
MARGIN_DEFAULT = 2.0
ALPHA_DEFAULT = 3.0
BETA_DEFAULT = 1e-5


@dataclass
class TripletBatch:
    anchor_cloud: PointCloud
    positive_cloud: PointCloud
    negative_cloud: PointCloud
    anchor_id: str
    negative_id: str

    def __post_init__(self):
        if self.negative_id == self.anchor_id:
            raise ValueError("negative must come from a different shape")


@dataclass
class LossBreakdown:
    cluster_term: float
    contrastive_term: float
    weight_decay_term: float
    total: float
    alpha: float
    beta: float
    tau: float = TAU_DEFAULT
    margin: float = MARGIN_DEFAULT

    def __post_init__(self):
        for label, v in (("cluster", self.cluster_term),
                         ("contrastive", self.contrastive_term),
                         ("weight decay", self.weight_decay_term)):
            if v < 0.0:
                raise ValueError(f"{label} term is negative: {v}")
        expect = (self.cluster_term + self.alpha * self.contrastive_term
                  + self.beta * self.weight_decay_term)
        if abs(self.total - expect) > 1e-6 * max(1.0, abs(expect)):
            raise ValueError(
                f"total {self.total} inconsistent with parts {expect}")


def _as_vector(g) -> np.ndarray:
    if isinstance(g, GlobalFeature):
        return g.vector
    return np.asarray(g)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("prototype rows must be nonzero")
    return mat / norms


def cluster_probability(g, prototypes: np.ndarray,
                        tau: float = TAU_DEFAULT) -> np.ndarray:
    """Probability of each cluster for one global feature."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    protos = _unit_rows(prototypes)
    z = protos @ _as_vector(g).astype(np.float64) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def cluster_loss(gs, assignments, prototypes: np.ndarray,
                 tau: float = TAU_DEFAULT):
    """Mean negative log-likelihood under the prototype softmax.

    Returns (loss, gradient w.r.t. each g, shape (B, M)). Prototypes are
    constants here by design.
    """
    gs = np.atleast_2d(np.asarray([_as_vector(g) for g in gs],
                                  dtype=np.float64))
    if gs.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.asarray(assignments, dtype=np.int64)
    protos = _unit_rows(prototypes)
    c = protos.shape[0]
    if ((y < 0) | (y >= c)).any():
        raise ValueError("assignment outside [0, C)")
    z = gs @ protos.T / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(len(gs))
    losses = -np.log(p[rows, y])
    b = len(gs)
    # d/dg of -log p_y = (sum_k p_k proto_k - proto_y) / tau, then / B
    grad = (p @ protos - protos[y]) / (tau * b)
    return float(losses.mean()), grad


def build_triplet(dataset, anchor_id: str, assignments,
                  rng: np.random.Generator) -> TripletBatch:
    """Fresh triplet for one anchor under the current cluster assignment.

    The negative is a uniform draw over shapes outside the anchor's
    cluster; if every shape shares one cluster the draw falls back to any
    other shape (logged once per call).
    """
    by_id = {r.shape_id: r for r in dataset.records}
    if anchor_id not in by_id:
        raise KeyError(f"unknown anchor {anchor_id!r}")
    anchor_rec = by_id[anchor_id]
    own = assignments[anchor_id]
    eligible = [r for r in dataset.records
                if assignments[r.shape_id] != own]
    if not eligible:
        log.warning("all shapes share one cluster; negative for %s drawn "
                    "from the full set", anchor_id)
        eligible = [r for r in dataset.records if r.shape_id != anchor_id]
    neg_rec = eligible[int(rng.integers(len(eligible)))]
    n = dataset.N
    return TripletBatch(
        anchor_cloud=resample_view(anchor_rec, n, rng),
        positive_cloud=resample_view(anchor_rec, n, rng),
        negative_cloud=resample_view(neg_rec, n, rng),
        anchor_id=anchor_id,
        negative_id=neg_rec.shape_id,
    )


def contrastive_loss(g, g_pos, g_neg, margin: float = MARGIN_DEFAULT):
    """Pull-to-positive plus hinged push-from-negative, both Euclidean.

    Returns (loss, grad_g, grad_pos, grad_neg); subgradient is zero at
    both distance corners.
    """
    g = _as_vector(g).astype(np.float64)
    gp = _as_vector(g_pos).astype(np.float64)
    gn = _as_vector(g_neg).astype(np.float64)
    dp_vec = g - gp
    dp = float(np.linalg.norm(dp_vec))
    dn_vec = g - gn
    dn = float(np.linalg.norm(dn_vec))
    loss = dp + max(0.0, margin - dn)
    grad_g = np.zeros_like(g)
    grad_p = np.zeros_like(g)
    grad_n = np.zeros_like(g)
    if dp > 0.0:
        u = dp_vec / dp
        grad_g += u
        grad_p -= u
    if dn > 0.0 and margin - dn > 0.0:
        u = dn_vec / dn
        grad_g -= u
        grad_n += u
    return float(loss), grad_g, grad_p, grad_n


def center_loss(gs, assignments, prototypes: np.ndarray):
    """Mean over the batch of half the squared distance to the assigned
    prototype; the A-Center-Cont ablation swaps this in for the softmax
    term."""
    gs = np.atleast_2d(np.asarray([_as_vector(g) for g in gs],
                                  dtype=np.float64))
    if gs.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.asarray(assignments, dtype=np.int64)
    protos = _unit_rows(prototypes)
    diff = gs - protos[y]
    b = len(gs)
    loss = 0.5 * float((diff * diff).sum()) / b
    return loss, diff / b


def supervised_head_loss(params, gs, labels, n_classes: int):
    """Affine head on the global features plus softmax cross-entropy.

    Returns (loss, grads) where grads carries "head.W", "head.b" and "g"
    (per-sample gradient on the input features). Used in place of the
    unsupervised terms when family labels are allowed in.
    """
    gs = np.atleast_2d(np.asarray([_as_vector(g) for g in gs],
                                  dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if ((y < 0) | (y >= n_classes)).any():
        raise ValueError("label outside [0, K)")
    if len(y) != len(gs):
        raise ValueError("labels and batch disagree in length")
    w = params.values["head.W"].astype(np.float64)
    bias = params.values["head.b"].astype(np.float64)
    if w.shape[1] != n_classes:
        raise ValueError("head width does not match class count")
    z = gs @ w + bias
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(len(gs))
    loss = float(-np.log(p[rows, y]).mean())
    dz = p.copy()
    dz[rows, y] -= 1.0
    dz /= len(gs)
    grads = {
        "head.W": gs.T @ dz,
        "head.b": dz.sum(axis=0),
        "g": dz @ w.T,
    }
    return loss, grads


def weight_decay_value(params) -> float:
    """Sum of squared affine weights; biases are exempt."""
    total = 0.0
    for name, v in params.values.items():
        if name.endswith(".W"):
            total += float(np.sum(v.astype(np.float64) ** 2))
    return total


def joint_loss(cluster_term: float, contrastive_term: float,
               weight_decay_term: float, alpha: float = ALPHA_DEFAULT,
               beta: float = BETA_DEFAULT, tau: float = TAU_DEFAULT,
               margin: float = MARGIN_DEFAULT) -> LossBreakdown:
    if alpha < 0.0 or beta < 0.0:
        raise ValueError("loss weights must be nonnegative")
    total = cluster_term + alpha * contrastive_term + beta * weight_decay_term
    return LossBreakdown(
        cluster_term=float(cluster_term),
        contrastive_term=float(contrastive_term),
        weight_decay_term=float(weight_decay_term),
        total=float(total),
        alpha=alpha,
        beta=beta,
        tau=tau,
        margin=margin,
    )
