#!/usr/bin/env python
"""What each auxiliary objective rewards, shown on attention maps built by hand."""
import numpy as np

from pdisconet import losses as L
from pdisconet.autograd import Tensor

H = W = 8


def stack(*fg):
    """Foreground maps plus the background channel that makes every pixel sum to one."""
    a = np.stack(fg)
    return np.concatenate([a, 1 - a.sum(axis=0, keepdims=True)])[None]


def point(i, j, value=1.0):
    m = np.zeros((H, W))
    m[i, j] = value
    return m


def block(i, j, size):
    m = np.zeros((H, W))
    m[i : i + size, j : j + size] = 1.0
    return m


cases = {
    "two bright points": stack(point(2, 2), point(5, 6)),
    "two faint points": stack(point(2, 2, 0.2), point(5, 6, 0.2)),
    "two 3x3 blocks": stack(block(1, 1, 3), block(4, 5, 3)),
    "one point, one empty map": stack(point(2, 2), np.zeros((H, W))),
}
print(f"{'maps':28s} {'conc':>8s} {'x1000':>8s} {'pres':>8s}")
for name, a in cases.items():
    t = Tensor(a)
    conc = L.concentration_loss(t).item()
    pres = L.presence_loss(t).item()
    print(f"{name:28s} {conc:8.5f} {1000 * conc:8.2f} {pres:8.4f}")

print()
print("With the default weights (1000 on concentration, 1 on presence) a compact 3x3 block")
print("costs more through its spatial spread than it saves in presence, so training drifts")
print("towards single-cell parts.")

v = np.eye(5)[:4]
print("\northogonality, orthonormal part vectors:", L.orthogonality_loss(Tensor(v)).item())
print("orthogonality, two identical vectors:   ", L.orthogonality_loss(Tensor(np.ones((2, 3)))).item())
