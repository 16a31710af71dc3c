"""Grouped Adam, step-decay schedule, the training loop and model evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from . import losses as L
from . import metrics
from .errors import ConfigError, NumericDomainError
from .model import PartModel, forward
from .synthgen import LabeledSample, stack
from .transforms import TransformRanges, sample_transform, warp_batch

log = logging.getLogger(__name__)

GROUPS = ("backbone", "head", "modulation")


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    lr_modulation: float = 1e-2
    decay_factor: float = 0.5
    decay_period: int = 5
    num_decays: int = 5
    batch_size: int = 16
    epochs: int = 30
    dropout_rate: float = 0.3
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    no_class: bool = False
    no_conc: bool = False
    no_orth: bool = False
    no_equiv: bool = False
    no_pres: bool = False
    no_dropout: bool = False
    include_background: bool = True
    grad_clip: float = 10.0
    max_angle_deg: float = 30.0
    max_shift: float = 0.1
    min_scale: float = 0.9
    max_scale: float = 1.1
    eval_size: int = 500
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    calibration_size: int = 256
    calibration_target: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_backbone", "lr_head", "lr_modulation"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if self.decay_period < 1 or self.num_decays < 0:
            raise ConfigError("decay_period must be >= 1 and num_decays >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.pretrain_epochs < 0 or not self.pretrain_lr > 0:
            raise ConfigError("pretrain_epochs must be >= 0 and pretrain_lr positive")
        if not self.calibration_target > 0:
            raise ConfigError("calibration_target must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def base_lrs(self) -> dict[str, float]:
        return {"backbone": self.lr_backbone, "head": self.lr_head, "modulation": self.lr_modulation}

    @property
    def transform_ranges(self) -> TransformRanges:
        a = math.radians(self.max_angle_deg)
        return TransformRanges((-a, a), (-self.max_shift, self.max_shift), (self.min_scale, self.max_scale))


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Multiplier ``decay^min(⌊epoch/period⌋, num_decays)`` shared by every group."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.decay_factor ** min(epoch // config.decay_period, config.num_decays)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    base_lrs: dict[str, float]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], base_lrs: dict[str, float]) -> "OptimizerState":
        return cls(
            dict(base_lrs),
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float | dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is a scalar or a per-parameter mapping. A non-finite gradient
    aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        if not rate > 0:
            raise ConfigError(f"learning rate for {name!r} must be positive")
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)


class GroupedAdam:
    """Adam over a :class:`PartModel` with one base learning rate per parameter group."""

    def __init__(self, model: PartModel, base_lrs: dict[str, float]):
        self.model = model
        groups = model.groups()
        self.group_of = {name: g for g, names in groups.items() for name in names}
        self.state = OptimizerState.for_params(
            {n: model.params[n].data for n in self.group_of}, base_lrs
        )

    def step(self, multiplier: float = 1.0, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {n: self.model.params[n].grad for n in self.group_of}
        lrs = {n: self.state.base_lrs[g] * multiplier for n, g in self.group_of.items()}
        params = {n: self.model.params[n].data for n in self.group_of}
        adam_step(params, grads, self.state, lrs)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(NumericDomainError):
    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainResult:
    model: PartModel
    log: list[dict]
    optimizer: GroupedAdam


def compute_losses(model: PartModel, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator) -> L.LossReport:
    """Training-mode forward pass(es) and the weighted loss report for one batch."""
    rate = 0.0 if config.no_dropout else config.dropout_rate
    out = forward(images, model, "train", rng, rate)
    terms: dict[str, ag.Tensor | float] = {}
    if not config.no_class:
        terms["class"] = L.classification_loss(out.logits, labels)
    if not config.no_conc:
        terms["conc"] = L.concentration_loss(out.attention)
    if not config.no_orth:
        terms["orth"] = L.orthogonality_loss(out.parts, config.include_background)
    if not config.no_equiv:
        ts = [sample_transform(rng, config.transform_ranges) for _ in range(len(images))]
        moved = warp_batch(ag.Tensor(images), ts)
        out_t = forward(moved, model, "train", rng, keep_mask=out.keep_mask)
        back = warp_batch(out_t.attention, [t.invert() for t in ts])
        terms["equiv"] = L.equivariance_loss(out.attention, back)
    if not config.no_pres:
        terms["pres"] = L.presence_loss(out.attention)
    return L.total_loss(terms, config.weights)


def pretrain(model: PartModel, samples: list[LabeledSample], config: TrainConfig,
             rng: np.random.Generator, epochs: int | None = None) -> list[dict]:
    """Warm-start the backbone and ``W_class`` on plain image classification.

    Logits are ``W_class`` applied to the spatial mean of the features, which
    equals the sum of all ``K+1`` area-normalised part vectors. Prototypes
    and modulation are untouched.
    """
    names = model.groups()["backbone"] + ["head.classifier"]
    params = {n: model.params[n].data for n in names}
    state = OptimizerState.for_params(params, {})
    images, labels, _, _ = stack(samples)
    history = []
    epochs = config.pretrain_epochs if epochs is None else epochs
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        total, steps = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            pooled = ag.mean(model.backbone(ag.Tensor(images[idx])), axis=(2, 3))
            loss = L.classification_loss(ag.matmul(pooled, model.classifier.transpose()), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"pretraining epoch {epoch} step {steps}: non-finite loss")
            loss.backward()
            grads = {n: model.params[n].grad for n in names}
            clip_grad_norm(grads, config.grad_clip)
            adam_step(params, grads, state, config.pretrain_lr)
            total += float(loss.data)
            steps += 1
        entry = {"epoch": epoch, "phase": "warmup", "steps": steps, "loss": {"class": total / steps},
                 "seconds": time.perf_counter() - t0}
        log.info("pretrain %d %s", epoch, entry)
        history.append(entry)
    if epochs:
        calibrate_feature_scale(model, images[: config.calibration_size], config.calibration_target)
    return history


def calibrate_feature_scale(model: PartModel, images: np.ndarray, target: float = 1.0) -> float:
    """Rescale the last conv layer so feature vectors have mean squared norm ``target``.

    ReLU is positively homogeneous, so scaling the last weight and bias by
    ``c`` scales the features by exactly ``c``; ``W_class`` is divided by
    ``c`` to keep the logits of mean-pooled features unchanged. This keeps
    the prototype initialisation in the regime of near-uniform attention.
    """
    if model.config.norm != "none":
        return 1.0
    with ag.no_grad():
        z = model.backbone(ag.Tensor(images)).data
    power = float(np.mean(np.sum(z * z, axis=1)))
    if not power > 0:
        return 1.0
    c = math.sqrt(target / power)
    last = len(model.config.widths) - 1
    model.params[f"backbone.conv{last}.weight"].data *= c
    model.params[f"backbone.conv{last}.bias"].data *= c
    model.params["head.classifier"].data /= c
    return c


def train(model: PartModel, samples: list[LabeledSample], config: TrainConfig,
          eval_samples: list[LabeledSample] | None = None,
          on_epoch: Callable[[dict, PartModel, GroupedAdam], None] | None = None) -> TrainResult:
    """Optimise ``model`` in place; returns it with one log entry per epoch.

    The first ``pretrain_epochs`` of the ``epochs`` budget are warm-up
    epochs (see :func:`pretrain`); the step-decay schedule counts from the
    first full-objective epoch. ``eval_samples`` (held out) are scored after
    every full epoch with all parts kept. ``on_epoch`` receives each log
    entry, e.g. to checkpoint; its optimizer argument is None during warm-up.
    """
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    warmup = min(config.pretrain_epochs, config.epochs)
    history: list[dict] = []
    for entry in pretrain(model, samples, config, rng, warmup):
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, model, None)
    opt = GroupedAdam(model, config.base_lrs)
    images, labels, _, _ = stack(samples)
    n = len(samples)
    for epoch in range(warmup, config.epochs):
        t0 = time.perf_counter()
        mult = lr_schedule(epoch - warmup, config)
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            try:
                report = compute_losses(model, images[idx], labels[idx], config, rng)
            except NumericDomainError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}", sums) from exc
            report.total.backward()
            grads = {name: model.params[name].grad for name in opt.group_of}
            clip_grad_norm(grads, config.grad_clip)
            try:
                opt.step(mult, grads)
            except NumericDomainError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}", report.as_dict()) from exc
            for k, v in report.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        entry = {"epoch": epoch, "phase": "main", "lr_multiplier": mult, "steps": steps}
        entry["loss"] = {k: v / steps for k, v in sums.items()}
        if eval_samples:
            res = evaluate(model, eval_samples[: config.eval_size])
            entry["eval"] = {k: res[k] for k in ("accuracy_pct", "nmi", "ari")}
        entry["seconds"] = time.perf_counter() - t0
        log.info("epoch %d %s", epoch, entry)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, model, opt)
    return TrainResult(model, history, opt)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: PartModel, images: np.ndarray, batch_size: int = 64):
    """Eval-mode attention maps ``N×(K+1)×H×W`` and class probabilities ``N×C``."""
    atts, probs = [], []
    with ag.no_grad():
        for start in range(0, len(images), batch_size):
            out = forward(images[start : start + batch_size], model, "eval")
            atts.append(out.attention.data)
            probs.append(out.probs.data)
    return np.concatenate(atts), np.concatenate(probs)


def evaluate(model: PartModel, samples: list[LabeledSample], train_samples: list[LabeledSample] | None = None,
             threshold: float = metrics.PRESENCE_THRESHOLD) -> dict:
    """Accuracy, NMI/ARI of part assignments at visible keypoints, and optionally keypoint regression."""
    images, labels, keypoints, visible = stack(samples)
    att, probs = predict(model, images)
    k = model.config.num_parts
    gt, pred = [], []
    centroids = np.empty((len(samples), k, 2))
    present = np.zeros((len(samples), k), dtype=bool)
    for i in range(len(samples)):
        vis = visible[i]
        gt.append(np.nonzero(vis)[0])
        pred.append(metrics.assign_keypoints(att[i], keypoints[i][vis]))
        c = metrics.extract_centroids(att[i], threshold)
        centroids[i] = c.xy
        present[i] = c.present
    gt_all = np.concatenate(gt)
    pred_all = np.concatenate(pred)
    result = {
        "accuracy_pct": metrics.accuracy(probs, labels),
        "nmi": metrics.nmi(gt_all, pred_all),
        "ari": metrics.ari(gt_all, pred_all),
        "per_part_presence_histogram": present.sum(axis=0).tolist(),
        "keypoint_error_pct": None,
        "attention": att,
        "probs": probs,
        "centroids": centroids,
        "present": present,
        "gt_labels": gt_all,
        "pred_labels": pred_all,
    }
    if train_samples is not None:
        tr_images, _, tr_kp, _ = stack(train_samples)
        tr_att, _ = predict(model, tr_images)
        tr_c = np.stack([metrics.extract_centroids(a, threshold).xy for a in tr_att])
        result["train_centroids"] = tr_c
        result["keypoint_error_pct"] = metrics.keypoint_regression(tr_c, tr_kp, centroids, keypoints, visible)
    return result
