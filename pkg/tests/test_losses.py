import math

import numpy as np
import pytest

from pdisconet import autograd as ag
from pdisconet import losses as L
from pdisconet.autograd import Tensor
from pdisconet.errors import NumericDomainError, PreconditionError, ShapeError

from conftest import check_grad


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), grad)


# independent loop-based oracles ------------------------------------------------


def conc_oracle(a):
    k1, h, w = a.shape
    total = 0.0
    for k in range(k1 - 1):
        m = a[k].sum() + 1e-6
        mx = my = 0.0
        for i in range(h):
            for j in range(w):
                mx += a[k, i, j] / m * (j + 0.5) / w
                my += a[k, i, j] / m * (i + 0.5) / h
        vx = vy = 0.0
        for i in range(h):
            for j in range(w):
                vx += a[k, i, j] / m * ((j + 0.5) / w - mx) ** 2
                vy += a[k, i, j] / m * ((i + 0.5) / h - my) ** 2
        total += vx + vy
    return total / (k1 - 1)


def orth_oracle(v):
    s = 0.0
    for k in range(len(v)):
        for l in range(len(v)):
            if k != l:
                s += v[k] @ v[l] / (math.sqrt(v[k] @ v[k]) * math.sqrt(v[l] @ v[l]) + 1e-6)
    return s


def equiv_oracle(a, t):
    k = a.shape[0] - 1
    return 1 - sum(
        float((a[i] * t[i]).sum()) / (np.sqrt((a[i] ** 2).sum()) * np.sqrt((t[i] ** 2).sum()) + 1e-6) for i in range(k)
    ) / k


# -- classification ------------------------------------------------------------


def test_class_loss_certain_prediction_is_zero():
    assert L.classification_loss(T([[800.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-300)


def test_class_loss_uniform():
    assert L.classification_loss(T(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_class_loss_matches_log_softmax_oracle(rng):
    z = rng.normal(size=(6, 5)) * 3
    y = rng.integers(0, 5, size=6)
    ref = -np.mean([z[i, y[i]] - np.log(np.sum(np.exp(z[i]))) for i in range(6)])
    assert abs(L.classification_loss(T(z), y).item() - ref) < 1e-12


def test_class_loss_large_logits_stay_finite():
    assert math.isfinite(L.classification_loss(T([[1e4, -1e4]]), [1]).item())


def test_class_loss_bad_index():
    with pytest.raises(NumericDomainError):
        L.classification_loss(T(np.zeros((1, 3))), [3])
    with pytest.raises(NumericDomainError):
        L.classification_loss(T(np.zeros((1, 3))), [-1])


# -- concentration ----------------------------------------------------------------


def test_conc_point_mass_is_zero():
    a = np.zeros((3, 5, 5))
    a[0, 1, 2] = 1.0
    a[1, 4, 0] = 0.7
    a[2] = 1.0 - a[0] - a[1]
    # the 1e-6 mass guard leaves an O(eps^2) residual
    assert L.concentration_loss(T(a)).item() == pytest.approx(0.0, abs=1e-11)


def test_conc_two_point_variance():
    b = np.zeros((2, 1, 2))
    b[0, 0, 0] = b[0, 0, 1] = 0.5  # x = 0.25 and 0.75
    assert L.concentration_loss(T(b)).item() == pytest.approx(0.0625, abs=1e-7)


def test_conc_uniform_4x4():
    a = np.ones((2, 4, 4))
    assert L.concentration_loss(T(a)).item() == pytest.approx(0.15625, rel=1e-6)


@pytest.mark.parametrize("scale", [0.1, 1.0, 10.0])
def test_conc_scale_invariance(rng, scale):
    a = rng.uniform(0.1, 1.0, size=(4, 6, 5))
    base = L.concentration_loss(T(a)).item()
    scaled = a.copy()
    scaled[:-1] *= scale
    assert L.concentration_loss(T(scaled)).item() == pytest.approx(base, rel=1e-5)


def test_conc_matches_loop_oracle(rng):
    a = rng.uniform(0, 1, size=(4, 5, 6))
    assert abs(L.concentration_loss(T(a)).item() - conc_oracle(a)) < 1e-12


def test_conc_batch_mean(rng):
    a = rng.uniform(0, 1, size=(3, 4, 5, 5))
    ref = np.mean([conc_oracle(x) for x in a])
    assert abs(L.concentration_loss(T(a)).item() - ref) < 1e-12


# -- orthogonality ------------------------------------------------------------------


def test_orth_orthogonal_pair():
    assert L.orthogonality_loss(T([[1.0, 0.0], [0.0, 2.0]])).item() == pytest.approx(0.0, abs=1e-15)


def test_orth_identical_pair_counts_ordered_pairs():
    assert L.orthogonality_loss(T([[1.0, 2.0], [1.0, 2.0]])).item() == pytest.approx(2.0, abs=1e-5)


def test_orth_matches_double_loop(rng):
    v = rng.normal(size=(4, 6))
    assert abs(L.orthogonality_loss(T(v)).item() - orth_oracle(v)) < 1e-10


def test_orth_background_flag(rng):
    v = rng.normal(size=(4, 6))
    assert abs(L.orthogonality_loss(T(v), include_background=False).item() - orth_oracle(v[:-1])) < 1e-10


def test_orth_orthonormal_set():
    q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(6, 6)))
    assert abs(L.orthogonality_loss(T(q[:5])).item()) < 1e-12


def test_orth_needs_two_vectors():
    with pytest.raises(PreconditionError):
        L.orthogonality_loss(T(np.ones((1, 3))))
    with pytest.raises(PreconditionError):
        L.orthogonality_loss(T(np.ones((2, 3))), include_background=False)


def test_orth_bounds(rng):
    for _ in range(20):
        v = rng.normal(size=(5, 3))
        assert -20 - 1e-9 <= L.orthogonality_loss(T(v)).item() <= 20 + 1e-9


# -- equivariance ---------------------------------------------------------------------


def test_equiv_identity(rng):
    a = rng.uniform(0, 1, size=(4, 5, 5))
    assert L.equivariance_loss(T(a), T(a)).item() < 1e-6


def test_equiv_disjoint_supports():
    a = np.zeros((3, 4, 4))
    t = np.zeros((3, 4, 4))
    a[:2, :2] = 1.0
    t[:2, 2:] = 1.0
    assert L.equivariance_loss(T(a), T(t)).item() == pytest.approx(1.0, abs=1e-15)


def test_equiv_matches_cosine_oracle(rng):
    a = rng.uniform(0, 1, size=(4, 5, 6))
    t = rng.uniform(0, 1, size=(4, 5, 6))
    assert abs(L.equivariance_loss(T(a), T(t)).item() - equiv_oracle(a, t)) < 1e-10


def test_equiv_shape_mismatch():
    with pytest.raises(ShapeError):
        L.equivariance_loss(T(np.ones((3, 4, 4))), T(np.ones((3, 4, 5))))


# -- presence -------------------------------------------------------------------------


def test_presence_plateau():
    a = np.zeros((2, 2, 6, 6))
    a[1, 0, 1:4, 2:5] = 1.0
    a[0, 1, 3:6, 0:3] = 1.0
    full = np.concatenate([a, 1 - a.sum(axis=1, keepdims=True)], axis=1)
    assert L.presence_loss(T(full)).item() < 1e-9


def test_presence_total_absence():
    a = np.zeros((2, 4, 5, 5))
    a[:, -1] = 1.0
    assert L.presence_loss(T(a)).item() == 1.0


def test_presence_single_pixel_impulse():
    a = np.zeros((2, 5, 5))
    a[0, 2, 2] = 1.0
    a[1] = 1 - a[0]
    assert L.presence_loss(T(a)).item() == pytest.approx(8 / 9, abs=1e-15)


def test_presence_decreases_as_plateau_grows():
    small = np.zeros((2, 7, 7))
    small[0, 3, 3] = 1.0
    big = np.zeros((2, 7, 7))
    big[0, 2:5, 2:5] = 1.0
    assert L.presence_loss(T(big)).item() < L.presence_loss(T(small)).item()


def test_presence_too_small():
    with pytest.raises(ShapeError):
        L.presence_loss(T(np.ones((2, 2, 5))))


# -- gradients --------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    r = np.random.default_rng(seed)
    b, k, h, w, d, c = 2, 3, 5, 5, 7, 4
    att = r.uniform(0.05, 1.0, size=(b, k + 1, h, w))
    back = r.uniform(0.05, 1.0, size=(b, k + 1, h, w))
    parts = r.normal(size=(b, k + 1, d))
    logits = r.normal(size=(b, c))
    labels = r.integers(0, c, size=b)
    assert check_grad(lambda z: L.classification_loss(z, labels), [logits]) < 1e-4
    assert check_grad(L.concentration_loss, [att]) < 1e-4
    assert check_grad(L.orthogonality_loss, [parts]) < 1e-4
    assert check_grad(L.equivariance_loss, [att, back]) < 1e-4
    # a unique maximum keeps the presence loss differentiable at the test point
    att_p = att.copy()
    att_p[r.integers(b), :k, 1:4, 1:4] += 1.0
    assert check_grad(L.presence_loss, [att_p]) < 1e-4


def test_loss_ranges(rng):
    for _ in range(10):
        a = rng.uniform(0, 1, size=(2, 4, 5, 5))
        t = rng.uniform(0, 1, size=(2, 4, 5, 5))
        assert L.concentration_loss(T(a)).item() >= 0
        assert 0 <= L.equivariance_loss(T(a), T(t)).item() <= 2
        assert 0 <= L.presence_loss(T(a)).item() <= 1


# -- total ------------------------------------------------------------------------------


def test_total_zero():
    r = L.total_loss({k: T(0.0) for k in L.TERMS}, L.LossWeights())
    assert r.total_value == 0.0


def test_total_weighting():
    r = L.total_loss({"conc": T(0.01)}, L.LossWeights())
    assert r.total_value == pytest.approx(10.0, abs=1e-12)
    assert r.values["orth"] == 0.0


def test_total_random_dot_product(rng):
    vals = rng.uniform(0, 3, size=5)
    terms = {k: T(v) for k, v in zip(L.TERMS, vals)}
    lam = np.array([1, 1000, 1, 1, 1.0])
    r = L.total_loss(terms, L.LossWeights())
    assert abs(r.total_value - float(vals @ lam)) < 1e-12
    assert r.total.item() == r.total_value


def test_total_gradient_reaches_every_term():
    xs = {k: T([0.5], True) for k in L.TERMS}
    r = L.total_loss({k: ag.sum(x) for k, x in xs.items()}, L.LossWeights())
    r.total.backward()
    assert xs["conc"].grad[0] == 1000.0
    assert all(xs[k].grad[0] == 1.0 for k in ("class", "orth", "equiv", "pres"))


def test_total_names_non_finite_term():
    with pytest.raises(NumericDomainError, match="equiv"):
        L.total_loss({"class": T(1.0), "equiv": T(float("nan"))}, L.LossWeights())


def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.cls, w.conc, w.orth, w.equiv, w.pres) == (1, 1000, 1, 1, 1)
    with pytest.raises(ValueError):
        L.LossWeights(orth=-1)
