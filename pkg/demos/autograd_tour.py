#!/usr/bin/env python
"""A short tour of the reverse-mode engine: build a graph, backpropagate, compare with finite differences."""
import numpy as np

from pdisconet import autograd as ag

rng = np.random.default_rng(0)

# a tiny two-layer network on a 6x6 image
x = ag.Tensor(rng.normal(size=(1, 3, 6, 6)))
w1 = ag.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
w2 = ag.Tensor(rng.normal(size=(2, 4)) * 0.3, requires_grad=True)


def loss_fn(w1, w2):
    h = ag.relu(ag.conv2d(x, w1, padding=1))          # 1x4x6x6
    pooled = ag.mean(h, axis=(2, 3))                  # 1x4
    logits = ag.matmul(pooled, w2.transpose())        # 1x2
    return ag.neg(ag.log_softmax(logits, axis=1)[0, 1])


loss = loss_fn(w1, w2)
loss.backward()
print(f"loss = {loss.item():.6f}")
print("analytic dL/dw2:\n", w2.grad)

# central differences on w2
h = 1e-5
numeric = np.zeros_like(w2.data)
for idx in np.ndindex(w2.shape):
    plus, minus = w2.data.copy(), w2.data.copy()
    plus[idx] += h
    minus[idx] -= h
    with ag.no_grad():
        numeric[idx] = (loss_fn(w1, ag.Tensor(plus)).item() - loss_fn(w1, ag.Tensor(minus)).item()) / (2 * h)
print("numeric  dL/dw2:\n", numeric)
print(f"max abs difference: {np.max(np.abs(numeric - w2.grad)):.2e}")

# graphs are single-use: a second backward through the same graph is an error
try:
    loss.backward()
except ag.GraphError as exc:
    print("second backward refused:", exc)
