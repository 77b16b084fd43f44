"""End-to-end training loop and inference-time cluster assignment.

Each epoch: refresh the memory bank with clean (augmentation-free)
forward passes, re-cluster it and recompute prototypes, then optimize
the joint objective over shuffled triplet batches built against the
fresh assignments. Prototypes stay fixed within the epoch. All RNG
streams are derived from (seed, purpose, epoch, shape), so the schedule
is reproducible regardless of evaluation order.

Modes: plain unsupervised training, a weakly-supervised variant (affine
head over the global feature plus cross-entropy, replacing the
unsupervised terms), and three ablations (no attention, no contrastive
term, center loss instead of the prototype softmax).
"""

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import engine
from .clustering import (MemoryBank, SpectralConfig, bank_update,
                         compute_prototypes, init_bank, spectral_cluster)
from .encoder import EncoderConfig, forward_shape_vars, init_params
from .engine import ModelParameters, adam_step, backward, harvest_grads
from .geometry import AugmentConfig, PointCloud, augment, \
    farthest_point_sample
from .objective import (build_triplet, center_loss, cluster_loss,
                        cluster_probability, contrastive_loss, joint_loss,
                        supervised_head_loss, weight_decay_value)
from .seeds import derive_rng
from .synthdata import resample_view

log = logging.getLogger(__name__)

MODES = (
    "unsupervised",
    "weakly-supervised",
    "ablation:w/o-Atten",
    "ablation:w/o-Cont",
    "ablation:A-Center-Cont",
)

CHECKPOINT_VERSION = 1


def _mild_augment() -> AugmentConfig:
    # the preset shapes share one canonical pose; training jitters around
    # it rather than opposing full rotations
    return AugmentConfig(rotation_max=0.3, tilt_max_deg=5.0,
                         scale_min=0.95, scale_max=1.05, shift_max=0.05,
                         jitter_sigma=0.0, jitter_clip=0.0)


@dataclass
class TrainConfig:
    C: int = 2
    N: int = 256
    M: int = 64
    tau: float = 0.07
    margin: float = 2.0
    alpha: float = 3.0
    beta: float = 1e-5
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 10
    seed: int = 0
    mode: str = "unsupervised"
    augment: AugmentConfig = field(default_factory=_mild_augment)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("C", "N", "M", "epochs", "batch_size"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        for name in ("tau", "margin", "lr"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("loss weights must be nonnegative")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(M=self.M)

    def uses_attention(self) -> bool:
        return self.mode != "ablation:w/o-Atten"

    def to_flat_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, AugmentConfig):
                for af in fields(v):
                    out[f"augment.{af.name}"] = repr(getattr(v, af.name))
            else:
                out[f.name] = str(v) if isinstance(v, str) else repr(v)
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        kwargs = {}
        aug_kwargs = {}
        casts = {f.name: f.type for f in fields(cls)}
        for key, raw in flat.items():
            if key.startswith("augment."):
                aug_kwargs[key.split(".", 1)[1]] = float(raw)
            elif key in casts:
                if key == "mode":
                    kwargs[key] = raw
                elif key in ("C", "N", "M", "epochs", "batch_size", "seed"):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
        if aug_kwargs:
            kwargs["augment"] = AugmentConfig(**aug_kwargs)
        return cls(**kwargs)


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    params: ModelParameters
    bank: np.ndarray
    assignments: np.ndarray
    prototypes: np.ndarray
    shape_ids: list
    seed: int
    epoch: int


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _snapshot(config, params, mb, epoch) -> Checkpoint:
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config=replace(config),
        params=params.copy(),
        bank=mb.bank.astype(np.float32),
        assignments=mb.assignments.astype(np.int64).copy(),
        prototypes=mb.prototypes.astype(np.float32),
        shape_ids=list(mb.shape_ids),
        seed=config.seed,
        epoch=epoch,
    )


def _family_labels(dataset):
    names = sorted({r.family_name for r in dataset.records})
    index = {name: i for i, name in enumerate(names)}
    return {r.shape_id: index[r.family_name] for r in dataset.records}, \
        len(names)


def train(dataset, config: TrainConfig):
    """Run the full loop; returns (checkpoint, per-batch metrics rows).

    Each metrics row is a dict with keys epoch, batch, cluster_term,
    contrastive_term, decay, total, assignment_changes (the epoch's
    re-cluster flip count, repeated on its rows).
    """
    if config.N > dataset.records[0].master_cloud.n:
        raise ValueError("N exceeds the master cloud size")
    enc_cfg = config.encoder_config()
    weak = config.mode == "weakly-supervised"
    labels, n_classes = _family_labels(dataset) if weak else ({}, 0)
    params = init_params(enc_cfg, derive_rng(config.seed, "params"),
                         n_head_classes=n_classes if weak else 0)
    mb = init_bank(len(dataset.records), config.M, config.C,
                   derive_rng(config.seed, "bank-init"),
                   shape_ids=[r.shape_id for r in dataset.records])
    attend = config.uses_attention()
    spectral_cfg = SpectralConfig()
    rows = []
    last_good = _snapshot(config, params, mb, 0)

    bank_views = {rec.shape_id: canonical_view(rec, config.N)
                  for rec in dataset.records}

    for epoch in range(config.epochs):
        # (1) clean forwards refresh the per-shape features; the fixed
        # farthest-point view keeps re-clustering free of resample noise
        for rec in dataset.records:
            leaves = params.leaves()
            _, _, g = forward_shape_vars(leaves, bank_views[rec.shape_id],
                                         enc_cfg, attend=attend)
            bank_update(mb, rec.shape_id, g.value.astype(np.float64))

        # (2) epoch barrier: re-cluster and freeze prototypes
        prev = mb.assignments.copy()
        mb.assignments = spectral_cluster(mb.bank, config.C, spectral_cfg)
        mb.prototypes = compute_prototypes(mb.bank, mb.assignments,
                                           config.C)
        mb.epoch = epoch + 1
        changes = int((prev != mb.assignments).sum())
        assign_of = {sid: int(mb.assignments[i])
                     for i, sid in enumerate(mb.shape_ids)}

        # (3) shuffled batches against the frozen assignment
        order = derive_rng(config.seed, "order", epoch).permutation(
            len(dataset.records))
        for b_idx, lo in enumerate(range(0, len(order), config.batch_size)):
            chunk = [dataset.records[i]
                     for i in order[lo: lo + config.batch_size]]
            try:
                breakdown = _train_batch(
                    dataset, chunk, params, mb, assign_of, config, enc_cfg,
                    attend, epoch, labels, n_classes)
            except FloatingPointError as err:
                raise TrainingDiverged(
                    f"divergence at epoch {epoch} batch {b_idx}: {err}",
                    last_good) from err
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b_idx}",
                    last_good)
            rows.append({
                "epoch": epoch,
                "batch": b_idx,
                "cluster_term": breakdown.cluster_term,
                "contrastive_term": breakdown.contrastive_term,
                "decay": breakdown.weight_decay_term,
                "total": breakdown.total,
                "assignment_changes": changes,
            })
        last_good = _snapshot(config, params, mb, epoch + 1)

    return _snapshot(config, params, mb, config.epochs), rows


def _train_batch(dataset, chunk, params, mb, assign_of, config, enc_cfg,
                 attend, epoch, labels, n_classes):
    breakdown, grads = batch_loss_and_grads(
        dataset, chunk, params, mb, assign_of, config, enc_cfg, attend,
        epoch, labels, n_classes)
    adam_step(params, grads, lr=config.lr)
    return breakdown


def batch_loss_and_grads(dataset, chunk, params, mb, assign_of, config,
                         enc_cfg, attend, epoch, labels, n_classes):
    """One batch's loss breakdown and parameter gradients, no update."""
    leaves = params.leaves()
    use_triplets = config.mode not in ("weakly-supervised",
                                       "ablation:w/o-Cont")
    anchor_gs, anchor_vars = [], []
    triplets = []
    cfg_aug = config.augment
    for rec in chunk:
        view_rng = derive_rng(config.seed, "triplet", epoch, rec.shape_id)
        aug_rng = derive_rng(config.seed, "augment", epoch, rec.shape_id)
        if use_triplets:
            trip = build_triplet(dataset, rec.shape_id, assign_of, view_rng)
            clouds = [augment(c, aug_rng, cfg_aug) for c in
                      (trip.anchor_cloud, trip.positive_cloud,
                       trip.negative_cloud)]
            gs = [forward_shape_vars(leaves, c, enc_cfg, attend=attend)[2]
                  for c in clouds]
            triplets.append(gs)
            g_anchor = gs[0]
        else:
            view = resample_view(rec, config.N, view_rng)
            view = augment(view, aug_rng, cfg_aug)
            _, _, g_anchor = forward_shape_vars(leaves, view, enc_cfg,
                                                attend=attend)
        anchor_vars.append(g_anchor)
        anchor_gs.append(g_anchor.value.astype(np.float64))

    anchor_gs = np.stack(anchor_gs)
    b = len(chunk)
    decay = weight_decay_value(params)

    if config.mode == "weakly-supervised":
        y = [labels[rec.shape_id] for rec in chunk]
        ce, head_grads = supervised_head_loss(params, anchor_gs, y,
                                              n_classes)
        for i, g_var in enumerate(anchor_vars):
            backward(g_var, head_grads["g"][i].astype(g_var.value.dtype))
        grads = harvest_grads(leaves)
        grads["head.W"] = head_grads["head.W"]
        grads["head.b"] = head_grads["head.b"]
        breakdown = joint_loss(ce, 0.0, decay, alpha=config.alpha,
                               beta=config.beta, tau=config.tau,
                               margin=config.margin)
    else:
        y = [assign_of[rec.shape_id] for rec in chunk]
        if config.mode == "ablation:A-Center-Cont":
            cl, cl_grad = center_loss(anchor_gs, y, mb.prototypes)
        else:
            cl, cl_grad = cluster_loss(anchor_gs, y, mb.prototypes,
                                       tau=config.tau)
        contr = 0.0
        seeds = [cl_grad[i] for i in range(b)]
        extra = []
        if use_triplets:
            for i, (ga, gp, gn) in enumerate(triplets):
                li, dga, dgp, dgn = contrastive_loss(
                    ga.value.astype(np.float64),
                    gp.value.astype(np.float64),
                    gn.value.astype(np.float64), margin=config.margin)
                contr += li / b
                w = config.alpha / b
                seeds[i] = seeds[i] + w * dga
                extra.append((gp, w * dgp))
                extra.append((gn, w * dgn))
        for g_var, s in zip(anchor_vars, seeds):
            backward(g_var, s.astype(g_var.value.dtype))
        for g_var, s in extra:
            backward(g_var, s.astype(g_var.value.dtype))
        grads = harvest_grads(leaves)
        breakdown = joint_loss(cl, contr, decay, alpha=config.alpha,
                               beta=config.beta, tau=config.tau,
                               margin=config.margin)

    for name, w in params.values.items():
        if name.endswith(".W"):
            dd = (2.0 * config.beta) * w.astype(np.float64)
            if name in grads:
                grads[name] = grads[name] + dd
            else:
                grads[name] = dd
    return breakdown, grads


def canonical_view(record, n: int) -> PointCloud:
    """Deterministic N-point view of a record: farthest-point subsample of
    the master cloud, no jitter."""
    idx = farthest_point_sample(record.master_cloud, n)
    return PointCloud(record.master_cloud.points[idx],
                      shape_id=record.shape_id)


def assign_cloud(checkpoint: Checkpoint, pc: PointCloud) -> int:
    """Nearest-prototype cluster id for an arbitrary cloud."""
    cfg = checkpoint.config
    leaves = checkpoint.params.leaves()
    _, _, g = forward_shape_vars(leaves, pc, cfg.encoder_config(),
                                 attend=cfg.uses_attention())
    p = cluster_probability(g.value.astype(np.float64),
                            checkpoint.prototypes.astype(np.float64),
                            tau=cfg.tau)
    return int(np.argmax(p))


def evaluate_assignments(checkpoint: Checkpoint, dataset) -> dict:
    """Cluster id per shape from deterministic canonical views."""
    out = {}
    for rec in dataset.records:
        out[rec.shape_id] = assign_cloud(
            checkpoint, canonical_view(rec, checkpoint.config.N))
    return out
