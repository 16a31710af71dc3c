"""Rigid image transforms (rotation, translation, scale about the centre).

A transform maps a point ``p`` (pixel units, relative to the map centre) to
``σ·R(θ)·p + t`` with ``t = (t_x·W, t_y·H)``. :func:`warp` resamples by
inverse mapping with bilinear interpolation and zero fill, which makes it
a fixed sparse linear operator on the map values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

# sample coordinates this close to a grid point are snapped onto it
_SNAP = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    angle: float = 0.0  # radians, counter-clockwise as displayed (y axis points down)
    tx: float = 0.0  # fraction of width
    ty: float = 0.0  # fraction of height
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        # counter-clockwise on screen == clockwise in (x right, y down) coordinates
        return self.scale * np.array([[c, s], [-s, c]])

    def invert(self) -> "RigidTransform":
        c, s = math.cos(self.angle), math.sin(self.angle)
        rinv = np.array([[c, -s], [s, c]])
        t = -(rinv @ np.array([self.tx, self.ty])) / self.scale
        return RigidTransform(-self.angle, float(t[0]), float(t[1]), 1.0 / self.scale)

    def apply_points(self, xy: np.ndarray, width: float, height: float) -> np.ndarray:
        """Map points given in pixel units relative to the centre."""
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix().T + np.array([self.tx * width, self.ty * height])

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and self.tx == 0.0 and self.ty == 0.0 and self.scale == 1.0


IDENTITY = RigidTransform()


@dataclass(frozen=True)
class TransformRanges:
    angle: tuple[float, float] = (-math.pi / 6, math.pi / 6)
    translation: tuple[float, float] = (-0.1, 0.1)
    scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("angle", "translation", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is inverted: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ConfigError("scale range must be positive")


def sample_transform(rng: np.random.Generator, ranges: TransformRanges | None = None) -> RigidTransform:
    """Draw angle, x/y translation and scale independently and uniformly."""
    r = ranges or TransformRanges()
    angle = rng.uniform(*r.angle)
    tx = rng.uniform(*r.translation)
    ty = rng.uniform(*r.translation)
    scale = rng.uniform(*r.scale)
    return RigidTransform(float(angle), float(tx), float(ty), float(scale))


def _snap(u: np.ndarray) -> np.ndarray:
    r = np.round(u)
    return np.where(np.abs(u - r) < _SNAP, r, u)


@lru_cache(maxsize=64)
def _warp_taps(t: RigidTransform, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Source indices and bilinear weights (4 taps per output pixel); invalid taps weigh 0."""
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    # output pixel centres relative to the map centre
    out_xy = np.stack([jj.ravel() + 0.5 - w / 2, ii.ravel() + 0.5 - h / 2], axis=1)
    src = t.invert().apply_points(out_xy, w, h)
    sx = _snap(src[:, 0] + w / 2 - 0.5)
    sy = _snap(src[:, 1] + h / 2 - 0.5)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    idx = np.zeros((4, h * w), dtype=np.int64)
    wts = np.zeros((4, h * w))
    for k, (dy, dx, wt) in enumerate((
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    )):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx[k, ok] = (yy[ok] * w + xx[ok]).astype(np.int64)
        wts[k, ok] = wt[ok]
    return idx, wts


@lru_cache(maxsize=64)
def _warp_operator(t: RigidTransform, h: int, w: int) -> sp.csr_matrix:
    idx, wts = _warp_taps(t, h, w)
    n = h * w
    rows = np.tile(np.arange(n), 4)
    return sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n, n))


def _apply(flat: np.ndarray, t: RigidTransform, h: int, w: int) -> np.ndarray:
    idx, wts = _warp_taps(t, h, w)
    out = flat[..., idx[0]] * wts[0]
    for k in range(1, 4):
        out += flat[..., idx[k]] * wts[k]
    return out


def warp(maps, t: RigidTransform) -> Tensor:
    """Resample ``[B×]C×H×W`` maps under ``t``; differentiable in the map values."""
    maps = ag._as_tensor(maps)
    if maps.ndim < 2:
        raise ShapeError("warp needs at least two spatial axes")
    h, w = maps.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"warp needs maps of at least 2×2, got {h}×{w}")
    if t.is_identity:
        return ag.custom_op(maps.data.copy(), (maps,), lambda g: (g,), "warp")
    out = _apply(maps.data.reshape(-1, h * w), t, h, w).reshape(maps.shape)

    def backward(g):
        op = _warp_operator(t, h, w)
        return (np.asarray(op.T @ g.reshape(-1, h * w).T).T.reshape(maps.shape),)

    return ag.custom_op(out, (maps,), backward, "warp")


def warp_batch(maps, transforms) -> Tensor:
    """Warp sample ``b`` of a ``B×C×H×W`` batch with ``transforms[b]``."""
    maps = ag._as_tensor(maps)
    if maps.ndim != 4 or len(transforms) != maps.shape[0]:
        raise ShapeError("warp_batch needs a B×C×H×W batch and one transform per sample")
    b, c, h, w = maps.shape
    if h < 2 or w < 2:
        raise ShapeError(f"warp needs maps of at least 2×2, got {h}×{w}")
    flat = maps.data.reshape(b, c, h * w)
    out = np.stack([
        flat[i].copy() if t.is_identity else _apply(flat[i], t, h, w) for i, t in enumerate(transforms)
    ]).reshape(maps.shape)

    def backward(g):
        gf = g.reshape(b, c, h * w)
        res = np.empty_like(gf)
        for i, t in enumerate(transforms):
            res[i] = gf[i] if t.is_identity else np.asarray(_warp_operator(t, h, w).T @ gf[i].T).T
        return (res.reshape(maps.shape),)

    return ag.custom_op(out, (maps,), backward, "warp_batch")
