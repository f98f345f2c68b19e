"""SGD training loop over the composed objective.

Every source of randomness is a named stream derived from the run seed, so
two fits with the same resolved config produce bit-identical parameters and
metrics.  Batches draw labeled rows from a per-epoch permutation of the
downstream set and unlabeled rows from a per-epoch permutation of the
sampled bank subset, wrapping around when the subset is smaller than the
epoch's unlabeled demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_view
from .embank import DownstreamDataset, EmbeddingBank, ValidationError
from .encoder import (
    EncoderGrads,
    EncoderParams,
    FrozenEmbedder,
    encode_and_classify,
    init_params,
    init_params_warm,
)
from .losses import LossConfig
from .objective import ObjectiveBatch, ObjectiveSettings, batch_objective
from .sampler import SampleResult
from .seeding import derive_rng

METRICS_HEADER = ("step,epoch,loss_x,loss_u,loss_con,loss_total,"
                  "n_confident,grad_norm,acc_eval")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    mu: int = 4
    t_thresh: float = 0.95
    eta: float = 1.0
    lambda_: float = 1.0
    tau: float = 0.07
    anchor_reduction: str = "sum"
    epochs: int = 12
    lr: float = 0.05
    momentum: float = 0.9
    hidden_dim: int = 32
    warm_start: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValidationError(["batch_size must be at least 1"])
        if self.mu < 0:
            raise ValidationError(["mu must be non-negative"])
        if not 0.0 < self.t_thresh <= 1.0:
            raise ValidationError(["t_thresh must lie in (0, 1]"])
        if self.epochs < 0:
            raise ValidationError(["epochs must be non-negative"])
        if self.lr <= 0.0:
            raise ValidationError(["lr must be positive"])
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(["momentum must lie in [0, 1)"])
        if self.hidden_dim < 1:
            raise ValidationError(["hidden_dim must be at least 1"])

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, eta=self.eta, lambda_=self.lambda_,
                          anchor_reduction=self.anchor_reduction)


@dataclass(frozen=True)
class SelectedBank:
    """Bank rows gathered by record id, in sampler emission order."""

    ids: np.ndarray            # (k,) original bank record ids
    images: np.ndarray         # (k, image_dim)
    caption_feats: np.ndarray  # (k, feat_dim)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_bank(cls, bank: EmbeddingBank, result: SampleResult) -> "SelectedBank":
        ids = np.asarray(result.selected_ids, dtype=np.int64)
        return cls(ids=ids, images=bank.images[ids],
                   caption_feats=bank.caption_feats[ids])


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    loss_x: float
    loss_u: float
    loss_con: float
    loss_total: float
    n_confident: int
    grad_norm: float
    acc_eval: float | None = None


@dataclass
class TrainResult:
    params: EncoderParams
    metrics: list[StepMetrics]

    @property
    def final_acc(self) -> float | None:
        for m in reversed(self.metrics):
            if m.acc_eval is not None:
                return m.acc_eval
        return None


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _augment_rows(images: np.ndarray, sample_ids: np.ndarray, view: str,
                  cfg: AugmentConfig, seed: int, epoch: int) -> np.ndarray:
    out = np.empty((sample_ids.shape[0], images.shape[1]))
    for row, sid in enumerate(sample_ids):
        out[row] = augment_view(images[row].astype(np.float64), view, cfg,
                                seed, epoch, int(sid))
    return out


def compose_batch(ds: DownstreamDataset, selected: SelectedBank,
                  class_text_feats: np.ndarray, cfg: TrainConfig,
                  epoch: int, step: int) -> ObjectiveBatch:
    n = ds.size
    order_l = derive_rng(cfg.seed, "batch-labeled", epoch).permutation(n)
    lab_idx = order_l[step * cfg.batch_size:(step + 1) * cfg.batch_size]
    if lab_idx.size == 0:
        raise ValueError(f"step {step} is past the end of epoch {epoch}")
    labeled_weak = _augment_rows(ds.images[lab_idx], lab_idx, "weak",
                                 cfg.augment, cfg.seed, epoch)

    u = cfg.mu * lab_idx.size
    if u > 0 and selected.size > 0:
        order_u = derive_rng(cfg.seed, "batch-unlabeled", epoch).permutation(
            selected.size)
        start = step * cfg.mu * cfg.batch_size
        pos = order_u[(start + np.arange(u)) % selected.size]
        # Augmentation ids offset by n so bank streams never collide with
        # downstream streams.
        aug_ids = n + pos
        unlabeled_weak = _augment_rows(selected.images[pos], aug_ids, "weak",
                                       cfg.augment, cfg.seed, epoch)
        unlabeled_strong = _augment_rows(selected.images[pos], aug_ids,
                                         "strong", cfg.augment, cfg.seed, epoch)
        caption_feats = selected.caption_feats[pos].astype(np.float64)
    else:
        dim = ds.image_dim
        unlabeled_weak = np.zeros((0, dim))
        unlabeled_strong = np.zeros((0, dim))
        caption_feats = np.zeros((0, class_text_feats.shape[1]))

    return ObjectiveBatch(
        labeled_weak=labeled_weak,
        labels=ds.labels[lab_idx].astype(np.int64),
        unlabeled_weak=unlabeled_weak,
        unlabeled_strong=unlabeled_strong,
        caption_feats=caption_feats,
        class_text_feats=np.asarray(class_text_feats, dtype=np.float64),
    )


def sgd_update(params: EncoderParams, velocity: EncoderGrads,
               grads: EncoderGrads, lr: float, momentum: float) -> None:
    for name in ("w1", "b1", "w2", "b2", "head_w", "head_b"):
        buf = getattr(velocity, name)
        buf *= momentum
        buf += getattr(grads, name)
        getattr(params, name)[...] -= lr * buf


def evaluate(params: EncoderParams, ds: DownstreamDataset) -> float:
    """Accuracy of head argmax on raw (unaugmented) images."""
    probs = encode_and_classify(params, ds.images.astype(np.float64)).probs
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == ds.labels))


def fit(ds: DownstreamDataset, selected: SelectedBank,
        class_text_feats: np.ndarray, cfg: TrainConfig,
        eval_ds: DownstreamDataset | None = None,
        embedder: FrozenEmbedder | None = None,
        params: EncoderParams | None = None) -> TrainResult:
    feat_dim = class_text_feats.shape[1]
    if params is None:
        if cfg.warm_start:
            if embedder is None:
                raise ValidationError(["warm_start needs the frozen embedder"])
            params = init_params_warm(cfg.seed, embedder, cfg.hidden_dim,
                                      ds.n_classes)
        else:
            params = init_params(cfg.seed, ds.image_dim, cfg.hidden_dim,
                                 feat_dim, ds.n_classes)
    velocity = EncoderGrads.zeros_like(params)
    loss_cfg = cfg.loss_config()
    metrics: list[StepMetrics] = []
    global_step = 0
    n_steps = steps_per_epoch(ds.size, cfg.batch_size)
    for epoch in range(cfg.epochs):
        for step in range(n_steps):
            batch = compose_batch(ds, selected, class_text_feats, cfg,
                                  epoch, step)
            settings = ObjectiveSettings(loss=loss_cfg, t_thresh=cfg.t_thresh,
                                         mu=cfg.mu,
                                         batch_size=batch.n_labeled)
            breakdown, grads = batch_objective(params, batch, settings)
            grad_norm = grads.norm()
            sgd_update(params, velocity, grads, cfg.lr, cfg.momentum)
            acc = None
            if eval_ds is not None and step == n_steps - 1:
                acc = evaluate(params, eval_ds)
            metrics.append(StepMetrics(
                step=global_step, epoch=epoch, loss_x=breakdown.loss_x,
                loss_u=breakdown.loss_u, loss_con=breakdown.loss_con,
                loss_total=breakdown.loss_total,
                n_confident=breakdown.n_confident, grad_norm=grad_norm,
                acc_eval=acc))
            global_step += 1
    return TrainResult(params=params, metrics=metrics)


def write_metrics_csv(metrics: list[StepMetrics], path) -> None:
    """Stable text form: repr of binary64 values, empty cell for no eval."""
    lines = [METRICS_HEADER]
    for m in metrics:
        acc = "" if m.acc_eval is None else repr(float(m.acc_eval))
        lines.append(",".join([
            str(m.step), str(m.epoch), repr(float(m.loss_x)),
            repr(float(m.loss_u)), repr(float(m.loss_con)),
            repr(float(m.loss_total)), str(m.n_confident),
            repr(float(m.grad_norm)), acc]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
