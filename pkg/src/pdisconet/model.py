"""Convolutional backbone and the part-discovery head.

Images go through a small CNN to a ``D×H×W`` feature map. Every feature
vector is compared with ``K+1`` learned prototypes (``K`` parts plus one
background) and a softmax over the squared-distance logits gives the
attention maps. The maps pool the features into one vector per part. Each
foreground vector is modulated elementwise, scored by a shared linear
classifier, and the kept part scores are averaged into class logits.

All functions accept a leading batch axis; single samples work too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, PreconditionError, ShapeError

POOLING_NORMS = ("area", "mass")
BACKBONE_NORMS = ("none", "instance", "pixel")


@dataclass
class ModelConfig:
    num_parts: int = 4
    num_classes: int = 16
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 32)
    downsample: tuple[bool, ...] = (True, True, False, False)
    pooling_norm: str = "area"
    use_modulation: bool = True
    norm: str = "none"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.downsample = tuple(bool(d) for d in self.downsample)
        if self.num_parts < 1:
            raise ConfigError("num_parts must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.widths) != len(self.downsample) or not self.widths:
            raise ConfigError("widths and downsample must be non-empty and of equal length")
        if self.norm not in BACKBONE_NORMS:
            raise ConfigError(f"norm must be one of {BACKBONE_NORMS}")
        if self.pooling_norm not in POOLING_NORMS:
            raise ConfigError(f"pooling_norm must be one of {POOLING_NORMS}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def feature_size(self, image_size: int) -> int:
        s = image_size
        for d in self.downsample:
            if d:
                s = (s + 2 - 3) // 2 + 1
        return s


class PartModel:
    """Backbone weights, ``K+1`` prototypes, ``K`` modulation vectors and ``W_class``.

    Parameters live in ``self.params`` (an insertion-ordered name → Tensor
    dict) and are split into three optimizer groups by :meth:`groups`.
    """

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        c_in = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            std = np.sqrt(2.0 / (c_in * 9))
            self.params[f"backbone.conv{i}.weight"] = Tensor(rng.normal(0.0, std, (width, c_in, 3, 3)), True)
            self.params[f"backbone.conv{i}.bias"] = Tensor(np.zeros(width), True)
            if cfg.norm == "instance":
                self.params[f"backbone.norm{i}.gain"] = Tensor(np.ones((width, 1, 1)), True)
            c_in = width
        d, k, c = cfg.feature_dim, cfg.num_parts, cfg.num_classes
        self.params["head.prototypes"] = Tensor(rng.normal(0.0, 0.1, (k + 1, d)), True)
        self.params["head.classifier"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (c, d)), True)
        self.params["modulation"] = Tensor(np.ones((k, d)), cfg.use_modulation)

    @property
    def prototypes(self) -> Tensor:
        return self.params["head.prototypes"]

    @property
    def classifier(self) -> Tensor:
        return self.params["head.classifier"]

    @property
    def modulation(self) -> Tensor:
        return self.params["modulation"]

    def groups(self) -> dict[str, list[str]]:
        """Parameter names per learning-rate group (backbone, head, modulation)."""
        out: dict[str, list[str]] = {"backbone": [], "head": [], "modulation": []}
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            out[name.split(".")[0]].append(name)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def backbone(self, images: Tensor) -> Tensor:
        x = images
        for i, down in enumerate(self.config.downsample):
            w = self.params[f"backbone.conv{i}.weight"]
            b = self.params[f"backbone.conv{i}.bias"]
            # stride-2 conv equals conv -> relu -> keep every other pixel
            x = ag.conv2d(x, w, b, stride=2 if down else 1, padding=1)
            if self.config.norm == "instance":
                x = instance_norm(x) * self.params[f"backbone.norm{i}.gain"] + b.reshape(-1, 1, 1)
            x = ag.relu(x)
        if self.config.norm == "pixel":
            x = pixel_norm(x)
        return x


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance per sample and channel over the spatial axes."""
    centred = x - ag.mean(x, axis=(-2, -1), keepdims=True)
    var = ag.mean(ag.square(centred), axis=(-2, -1), keepdims=True)
    return centred / ag.sqrt(var + eps)


def pixel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise every feature vector across channels (axis -3)."""
    centred = x - ag.mean(x, axis=-3, keepdims=True)
    var = ag.mean(ag.square(centred), axis=-3, keepdims=True)
    return centred / ag.sqrt(var + eps)


@dataclass
class ForwardOutput:
    features: Tensor  # B×D×H×W
    attention: Tensor  # B×(K+1)×H×W
    parts: Tensor  # B×(K+1)×D
    part_scores: Tensor  # B×K×C
    logits: Tensor  # B×C
    probs: Tensor  # B×C
    keep_mask: np.ndarray = field(repr=False)  # B×K bool


def compute_attention(features: Tensor, prototypes: Tensor) -> Tensor:
    """Softmax over prototypes of negative squared distances, per pixel.

    ``features`` is ``[B×]D×H×W``, ``prototypes`` is ``(K+1)×D``; the result
    is ``[B×](K+1)×H×W``.
    """
    features = ag._as_tensor(features)
    prototypes = ag._as_tensor(prototypes)
    single = features.ndim == 3
    if single:
        features = features.reshape((1,) + features.shape)
    if features.ndim != 4:
        raise ShapeError(f"features must be [B×]D×H×W, got {features.shape}")
    b, d, h, w = features.shape
    if prototypes.ndim != 2 or prototypes.shape[1] != d:
        raise ShapeError(f"prototype shape {prototypes.shape} does not match feature dim {d}")
    z = features.reshape(b, d, h * w).transpose(0, 2, 1)  # B×HW×D
    zz = ag.sum(ag.square(z), axis=2, keepdims=True)  # B×HW×1
    pp = ag.sum(ag.square(prototypes), axis=1).reshape(1, 1, -1)  # 1×1×(K+1)
    cross = ag.matmul(z, prototypes.transpose())  # B×HW×(K+1)
    logits = ag.neg(zz - 2.0 * cross + pp)
    att = ag.softmax(logits, axis=2).transpose(0, 2, 1).reshape(b, -1, h, w)
    return att.reshape(att.shape[1:]) if single else att


def pool_part_vectors(features: Tensor, attention: Tensor, norm: str = "area") -> Tensor:
    """Attention-weighted feature sums, divided by ``H·W`` (``area``) or by the map's mass."""
    features = ag._as_tensor(features)
    attention = ag._as_tensor(attention)
    if norm not in POOLING_NORMS:
        raise ConfigError(f"pooling norm must be one of {POOLING_NORMS}")
    single = features.ndim == 3
    if single:
        features = features.reshape((1,) + features.shape)
        attention = attention.reshape((1,) + attention.shape)
    if features.ndim != 4 or attention.ndim != 4:
        raise ShapeError("features and attention must be [B×]C×H×W")
    b, d, h, w = features.shape
    if attention.shape[0] != b or attention.shape[2:] != (h, w):
        raise ShapeError(f"attention {attention.shape} does not match features {features.shape}")
    k1 = attention.shape[1]
    a = attention.reshape(b, k1, h * w)
    z = features.reshape(b, d, h * w).transpose(0, 2, 1)
    weighted = ag.matmul(a, z)  # B×(K+1)×D
    if norm == "area":
        v = weighted / float(h * w)
    else:
        v = weighted / (ag.sum(a, axis=2, keepdims=True) + 1e-6)
    return v.reshape(v.shape[1:]) if single else v


def classify(parts: Tensor, modulation: Tensor | None, classifier: Tensor, keep_mask):
    """Per-part class scores and their average over kept parts.

    ``parts`` is ``[B×](K+1)×D``; the trailing background vector is not
    classified. Returns ``(part_scores, logits, probs)`` shaped
    ``[B×]K×C``, ``[B×]C``, ``[B×]C``.
    """
    parts = ag._as_tensor(parts)
    keep = np.asarray(keep_mask, dtype=bool)
    single = parts.ndim == 2
    if single:
        parts = parts.reshape((1,) + parts.shape)
        keep = keep.reshape(1, -1)
    b, k1, d = parts.shape
    k = k1 - 1
    if keep.shape != (b, k):
        raise ShapeError(f"keep mask shape {keep.shape} != {(b, k)}")
    if not keep.any(axis=1).all():
        raise PreconditionError("every sample must keep at least one part")
    if classifier.shape[1] != d:
        raise ShapeError(f"classifier {classifier.shape} does not match part dim {d}")
    fg = parts[:, :k, :]
    if modulation is not None:
        if modulation.shape != (k, d):
            raise ShapeError(f"modulation shape {modulation.shape} != {(k, d)}")
        fg = fg * modulation
    scores = ag.matmul(fg, classifier.transpose())  # B×K×C
    weights = keep / keep.sum(axis=1, keepdims=True)
    logits = ag.sum(scores * weights[:, :, None], axis=1)
    probs = ag.softmax(logits, axis=1)
    if single:
        return scores.reshape(scores.shape[1:]), logits.reshape(-1), probs.reshape(-1)
    return scores, logits, probs


def sample_part_dropout(num_parts: int, rate: float, rng: np.random.Generator | None = None, train: bool = True):
    """Keep each part with probability ``1 − rate``; redraw if nothing survives."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"part dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return np.ones(num_parts, dtype=bool)
    if rng is None:
        raise PreconditionError("training-mode dropout needs an rng")
    while True:
        mask = rng.random(num_parts) >= rate
        if mask.any():
            return mask


def forward(images, model: PartModel, mode: str = "eval", rng=None, dropout_rate: float = 0.0,
            keep_mask=None) -> ForwardOutput:
    """Run backbone, attention, pooling, part dropout and classification.

    ``images`` is ``3×S×S`` or ``B×3×S×S``; outputs always carry the batch
    axis. ``mode="train"`` draws a dropout mask per image from ``rng``
    unless ``keep_mask`` is given; ``mode="eval"`` keeps every part.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = ag._as_tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    k = model.config.num_parts
    b = x.shape[0]
    if keep_mask is None:
        if mode == "train":
            if rng is None:
                raise PreconditionError("train mode needs an rng")
            keep_mask = np.stack([sample_part_dropout(k, dropout_rate, rng) for _ in range(b)])
        else:
            keep_mask = np.ones((b, k), dtype=bool)
    keep_mask = np.asarray(keep_mask, dtype=bool).reshape(b, k)

    z = model.backbone(x)
    att = compute_attention(z, model.prototypes)
    parts = pool_part_vectors(z, att, model.config.pooling_norm)
    mod = model.modulation if model.config.use_modulation else None
    scores, logits, probs = classify(parts, mod, model.classifier, keep_mask)
    return ForwardOutput(z, att, parts, scores, logits, probs, keep_mask)
