"""Part-quality and classification metrics.

Coordinates follow the concentration-loss convention: cell centres
normalised to ``[0, 1]``, ``x`` along width, ``y`` along height.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericDomainError, PreconditionError, ShapeError

PRESENCE_THRESHOLD = 0.1


@dataclass
class PartCentroids:
    xy: np.ndarray  # K×2, NaN where absent
    present: np.ndarray  # K bool


def _maps(attention) -> np.ndarray:
    a = np.asarray(getattr(attention, "data", attention), dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"expected a (K+1)×H×W attention stack, got {a.shape}")
    return a


def extract_centroids(attention, threshold: float = PRESENCE_THRESHOLD) -> PartCentroids:
    """Centre of mass of every foreground map whose peak reaches ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise PreconditionError("threshold must lie in (0, 1)")
    a = _maps(attention)
    k1, h, w = a.shape
    fg = a[:-1]
    present = fg.reshape(k1 - 1, -1).max(axis=1) >= threshold
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    mass = fg.sum(axis=(1, 2))
    safe = np.where(mass > 0, mass, 1.0)
    cx = (fg.sum(axis=1) @ xs) / safe
    cy = (fg.sum(axis=2) @ ys) / safe
    xy = np.stack([cx, cy], axis=1)
    xy[~present] = np.nan
    return PartCentroids(xy, present)


def assign_keypoints(attention, keypoints) -> np.ndarray:
    """Predicted part (argmax over all K+1 channels) at each keypoint's feature cell.

    ``keypoints`` is an ``N×2`` array of ``(x, y)`` in ``[0, 1]``; the
    background channel (index ``K``) is a legal prediction.
    """
    a = _maps(attention)
    _, h, w = a.shape
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if np.any(kp < 0) or np.any(kp > 1) or np.any(~np.isfinite(kp)):
        raise NumericDomainError("keypoint coordinates must lie in [0, 1]")
    cols = np.clip(np.floor(kp[:, 0] * w).astype(int), 0, w - 1)
    rows = np.clip(np.floor(kp[:, 1] * h).astype(int), 0, h - 1)
    return a[:, rows, cols].argmax(axis=0)


def _check_pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u).ravel()
    v = np.asarray(v).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"label sequences differ in length: {u.size} vs {v.size}")
    if u.size == 0:
        raise PreconditionError("empty partition")
    if np.any(u < 0) or np.any(v < 0):
        raise PreconditionError("labels must be nonnegative")
    return u, v


def contingency(u, v) -> np.ndarray:
    u, v = _check_pair(u, v)
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    table = np.zeros((ui.max() + 1, vi.max() + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(u, v) -> float:
    """Mutual information over the arithmetic mean of the two entropies (natural log)."""
    table = contingency(u, v)
    n = int(table.sum())
    a, b = table.sum(axis=1), table.sum(axis=0)
    hu, hv = _entropy(a, n), _entropy(b, n)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(a, b)[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return max(0.0, min(1.0, mi / ((hu + hv) / 2)))


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(u, v) -> float:
    """Adjusted Rand index; 1 when the partitions coincide, even if degenerate."""
    table = contingency(u, v)
    n = int(table.sum())
    index = _comb2(table).sum()
    sa = _comb2(table.sum(axis=1)).sum()
    sb = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sa * sb / total if total > 0 else 0.0
    max_index = (sa + sb) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def accuracy(predictions, labels) -> float:
    """Percentage of correct predictions; 2-D score arrays are reduced by argmax."""
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    labels = np.asarray(labels).ravel()
    if pred.shape != labels.shape:
        raise ShapeError(f"{pred.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise PreconditionError("no samples")
    return 100.0 * float(np.mean(pred == labels))


def centroid_features(centroids: np.ndarray, fill: np.ndarray | None = None):
    """Flatten ``N×K×2`` centroids to ``N×2K``, imputing NaNs with per-part means.

    Returns the features and the fill values used (computed from this set if
    ``fill`` is not given).
    """
    c = np.asarray(centroids, dtype=np.float64)
    if fill is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fill = np.nanmean(c, axis=0)
        fill = np.where(np.isnan(fill), 0.5, fill)
    filled = np.where(np.isnan(c), fill[None], c)
    return filled.reshape(len(c), -1), fill


def keypoint_regression(train_centroids, train_keypoints, test_centroids, test_keypoints,
                        test_visible=None) -> float:
    """Test error (% of the image diagonal) of a linear map from part centroids to keypoints.

    Centroids are ``N×K×2`` (NaN = absent part); keypoints are ``N×P×2``.
    The map (with bias) is fit by least squares on the training set.
    """
    tr_c = np.asarray(train_centroids, dtype=np.float64)
    te_c = np.asarray(test_centroids, dtype=np.float64)
    tr_k = np.asarray(train_keypoints, dtype=np.float64)
    te_k = np.asarray(test_keypoints, dtype=np.float64)
    n, k = tr_c.shape[:2]
    if n < 2 * k + 1:
        raise PreconditionError(f"need at least {2 * k + 1} training images, got {n}")
    x_tr, fill = centroid_features(tr_c)
    x_te, _ = centroid_features(te_c, fill)
    design = np.hstack([x_tr, np.ones((n, 1))])
    target = tr_k.reshape(n, -1)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        warnings.warn("rank-deficient centroid design matrix; using the pseudo-inverse", RuntimeWarning)
        coef = np.linalg.pinv(design) @ target
    else:
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    pred = (np.hstack([x_te, np.ones((len(x_te), 1))]) @ coef).reshape(te_k.shape)
    dist = np.linalg.norm(pred - te_k, axis=-1)
    if test_visible is not None:
        dist = dist[np.asarray(test_visible, dtype=bool)]
    return 100.0 * float(dist.mean()) / math.sqrt(2.0)
