"""Training objectives on attention maps, part vectors and class logits.

Every loss accepts a leading batch axis and averages over it, except the
presence loss, whose maximum runs over the batch as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericDomainError, PreconditionError, ShapeError

EPS = 1e-6
# keeps sqrt differentiable at an all-zero vector without moving any realistic norm
_SQRT_GUARD = 1e-300

TERMS = ("class", "conc", "orth", "equiv", "pres")


@dataclass
class LossWeights:
    cls: float = 1.0
    conc: float = 1000.0
    orth: float = 1.0
    equiv: float = 1.0
    pres: float = 1.0

    def __post_init__(self):
        for name in ("cls", "conc", "orth", "equiv", "pres"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {"class": self.cls, "conc": self.conc, "orth": self.orth, "equiv": self.equiv, "pres": self.pres}


@dataclass
class LossReport:
    values: dict[str, float]
    total_value: float
    total: Tensor = field(repr=False)

    def as_dict(self) -> dict[str, float]:
        return {**self.values, "total": self.total_value}


def _batched(a: Tensor, ndim: int) -> Tensor:
    a = ag._as_tensor(a)
    if a.ndim == ndim - 1:
        return a.reshape((1,) + a.shape)
    if a.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1} or {ndim} axes, got shape {a.shape}")
    return a


def _norm(x: Tensor, axis) -> Tensor:
    return ag.sqrt(ag.sum(ag.square(x), axis=axis) + _SQRT_GUARD)


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy, evaluated as ``logsumexp(s) − s_y`` on the logits."""
    logits = _batched(logits, 2)
    y = np.atleast_1d(np.asarray(labels))
    b, c = logits.shape
    if y.shape != (b,):
        raise ShapeError(f"{y.shape[0]} labels for {b} samples")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= c):
        raise NumericDomainError(f"class indices must be integers in [0, {c})")
    logp = ag.log_softmax(logits, axis=1)
    return ag.neg(ag.mean(logp[np.arange(b), y]))


def concentration_loss(attention: Tensor) -> Tensor:
    """Mean over foreground parts of vertical plus horizontal spatial variance.

    Pixel coordinates are cell centres normalised to ``[0, 1]``.
    """
    a = _batched(attention, 4)
    b, k1, h, w = a.shape
    k = k1 - 1
    fg = a[:, :k]
    mass = ag.sum(fg, axis=(2, 3), keepdims=True) + EPS
    p = fg / mass
    xs = ((np.arange(w) + 0.5) / w).reshape(1, 1, 1, w)
    ys = ((np.arange(h) + 0.5) / h).reshape(1, 1, h, 1)
    mu_x = ag.sum(p * xs, axis=(2, 3), keepdims=True)
    mu_y = ag.sum(p * ys, axis=(2, 3), keepdims=True)
    var_x = ag.sum(p * ag.square(xs - mu_x), axis=(2, 3))
    var_y = ag.sum(p * ag.square(ys - mu_y), axis=(2, 3))
    return ag.mean(ag.sum(var_x + var_y, axis=1) / k)


def orthogonality_loss(parts: Tensor, include_background: bool = True) -> Tensor:
    """Sum of cosine similarities over ordered pairs of distinct part vectors."""
    v = _batched(parts, 3)
    if not include_background:
        v = v[:, :-1]
    n = v.shape[1]
    if n < 2:
        raise PreconditionError("orthogonality needs at least two part vectors")
    gram = ag.matmul(v, v.transpose(0, 2, 1))
    norms = _norm(v, axis=2)
    outer = norms.reshape(-1, n, 1) * norms.reshape(-1, 1, n)
    cos = gram / (outer + EPS)
    off_diag = 1.0 - np.eye(n)
    return ag.mean(ag.sum(cos * off_diag, axis=(1, 2)))


def equivariance_loss(attention: Tensor, attention_back: Tensor) -> Tensor:
    """One minus the mean foreground cosine similarity between two attention stacks.

    ``attention_back`` is the attention of the transformed image warped back
    into the original frame.
    """
    a = _batched(attention, 4)
    t = _batched(attention_back, 4)
    if a.shape != t.shape:
        raise ShapeError(f"attention shapes differ: {a.shape} vs {t.shape}")
    k = a.shape[1] - 1
    a, t = a[:, :k], t[:, :k]
    dot = ag.sum(a * t, axis=(2, 3))
    denom = _norm(a, axis=(2, 3)) * _norm(t, axis=(2, 3)) + EPS
    return 1.0 - ag.mean(dot / denom)


def presence_loss(attention: Tensor) -> Tensor:
    """One minus the mean over parts of the batch-wide max of 3×3-pooled attention."""
    a = _batched(attention, 4)
    if a.shape[2] < 3 or a.shape[3] < 3:
        raise ShapeError(f"presence loss needs maps of at least 3×3, got {a.shape[2:]}")
    k = a.shape[1] - 1
    pooled = ag.avgpool2d(a[:, :k], kernel=3, stride=1)
    peak = ag.max(pooled, axis=(0, 2, 3))
    return 1.0 - ag.mean(peak)


def total_loss(terms: dict[str, Tensor | float], weights: LossWeights) -> LossReport:
    """Weighted sum of the named terms; missing terms count as zero."""
    lam = weights.as_dict()
    unknown = set(terms) - set(lam)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    values: dict[str, float] = {}
    total: Tensor = Tensor(0.0)
    total_value = 0.0
    for name in TERMS:
        term = terms.get(name, 0.0)
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NumericDomainError(f"loss term {name!r} is not finite ({value})")
        values[name] = value
        total_value += lam[name] * value
        if isinstance(term, Tensor):
            total = total + lam[name] * term
    return LossReport(values, total_value, total)
