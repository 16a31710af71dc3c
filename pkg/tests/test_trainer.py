import math

import numpy as np
import pytest

from pdisconet import autograd as ag
from pdisconet import losses as L
from pdisconet import model as M
from pdisconet import synthgen as G
from pdisconet import trainer as T
from pdisconet.errors import ConfigError, NumericDomainError


def tiny_model(seed=0):
    return M.PartModel(M.ModelConfig(num_parts=3, num_classes=16, widths=(8, 8),
                                     downsample=(True, True), seed=seed))


@pytest.fixture(scope="module")
def data():
    return G.generate(2, 32)


# -- Adam -----------------------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    st = T.OptimizerState.for_params(p, {})
    T.adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    assert p["w"].tolist() == [1.0, -2.0]
    assert not st.m["w"].any() and not st.v["w"].any()
    assert st.step == 1


def test_adam_first_step_hand_value():
    p = {"x": np.array(0.0)}
    st = T.OptimizerState.for_params(p, {})
    T.adam_step(p, {"x": np.array(1.0)}, st, 0.01)
    assert p["x"] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-18)


def test_adam_converges_on_parabola():
    p = {"x": np.array(1.0)}
    st = T.OptimizerState.for_params(p, {})
    for _ in range(100):
        T.adam_step(p, {"x": 2 * p["x"]}, st, 0.1)
    assert abs(p["x"]) < 0.1


def test_adam_matches_reference_recurrence(rng):
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.003
    x = rng.normal(size=4)
    p = {"x": x.copy()}
    st = T.OptimizerState.for_params(p, {})
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 20):
        g = rng.normal(size=4)
        T.adam_step(p, {"x": g}, st, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p["x"], x, atol=1e-14)
    assert st.step == 19


def test_adam_non_finite_gradient_names_parameter():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    st = T.OptimizerState.for_params(p, {})
    with pytest.raises(NumericDomainError, match="'b'"):
        T.adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st, 0.1)
    assert st.step == 0 and not p["a"].any()


def test_adam_rejects_non_positive_rate():
    p = {"a": np.zeros(1)}
    with pytest.raises(ConfigError):
        T.adam_step(p, {"a": np.ones(1)}, T.OptimizerState.for_params(p, {}), 0.0)


# -- schedule ----------------------------------------------------------------------------


def test_schedule_examples():
    cfg = T.TrainConfig()
    assert T.lr_schedule(0, cfg) == 1.0
    assert T.lr_schedule(4, cfg) == 1.0
    assert T.lr_schedule(5, cfg) == 0.5
    assert T.lr_schedule(50, cfg) == 0.03125
    assert T.lr_schedule(1000, cfg) == 0.03125


def test_schedule_monotone():
    cfg = T.TrainConfig(decay_period=3)
    vals = [T.lr_schedule(e, cfg) for e in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        T.lr_schedule(-1, T.TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr_head=0)
    with pytest.raises(ConfigError):
        T.TrainConfig(decay_factor=1.0)
    with pytest.raises(ConfigError):
        T.TrainConfig(dropout_rate=1.0)


# -- grouped optimiser ----------------------------------------------------------------------


def test_group_learning_rates_probe():
    m = tiny_model()
    before = {n: p.data.copy() for n, p in m.params.items()}
    opt = T.GroupedAdam(m, T.TrainConfig().base_lrs)
    opt.step(1.0, {n: np.ones_like(m.params[n].data) for n in opt.group_of})
    bias = 1 / (1 + 1e-8)
    expected = {"backbone": 1e-4, "head": 1e-3, "modulation": 1e-2}
    for group, names in m.groups().items():
        for n in names:
            delta = np.abs(m.params[n].data - before[n])
            np.testing.assert_allclose(delta, expected[group] * bias, rtol=1e-9)


def test_group_multiplier_scales_every_group():
    m = tiny_model()
    before = {n: p.data.copy() for n, p in m.params.items()}
    opt = T.GroupedAdam(m, T.TrainConfig().base_lrs)
    opt.step(0.25, {n: np.ones_like(m.params[n].data) for n in opt.group_of})
    d = np.abs(m.params["modulation"].data - before["modulation"])
    np.testing.assert_allclose(d, 0.25e-2 / (1 + 1e-8), rtol=1e-9)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert T.clip_grad_norm(g, 1.0) == 5.0
    assert math.isclose(math.sqrt(sum((x * x).sum() for x in g.values())), 1.0, rel_tol=1e-9)
    g2 = {"a": np.array([0.3])}
    T.clip_grad_norm(g2, 1.0)
    assert g2["a"][0] == 0.3


# -- training loop --------------------------------------------------------------------------


def test_zero_epochs_leaves_model_unchanged(data):
    m = tiny_model()
    before = m.state_dict()
    res = T.train(m, data, T.TrainConfig(epochs=0, pretrain_epochs=3))
    assert res.log == []
    for n, v in m.state_dict().items():
        assert np.array_equal(v, before[n])


def test_classification_only_step_routes_gradients(data):
    m = tiny_model()
    images, labels, _, _ = G.stack(data[:8])
    out = M.forward(images, m, "train", np.random.default_rng(3), 0.5)
    keep = out.keep_mask
    assert not keep.all()
    m.zero_grad()
    L.classification_loss(out.logits, labels).backward()
    before = m.params["modulation"].data.copy()
    opt = T.GroupedAdam(m, T.TrainConfig().base_lrs)
    opt.step()
    moved = np.any(m.params["modulation"].data != before, axis=1)
    used = keep.any(axis=0)
    assert np.array_equal(moved, used)


def test_ablation_switch_zeroes_term(data):
    m = tiny_model()
    images, labels, _, _ = G.stack(data[:4])
    rep = T.compute_losses(m, images, labels, T.TrainConfig(no_orth=True), np.random.default_rng(0))
    assert rep.as_dict()["orth"] == 0.0


def run_short(data, seed=0):
    m = tiny_model()
    cfg = T.TrainConfig(epochs=2, pretrain_epochs=1, seed=seed, eval_size=8)
    return T.train(m, data[:24], cfg, data[24:])


def test_training_replays_bit_identically(data):
    a = run_short(data)
    b = run_short(data)
    for n, v in a.model.state_dict().items():
        assert v.tobytes() == b.model.state_dict()[n].tobytes()
    strip = lambda log: [{k: v for k, v in e.items() if k != "seconds"} for e in log]
    assert strip(a.log) == strip(b.log)


def test_training_log_layout(data):
    res = run_short(data)
    assert [(e["epoch"], e["phase"]) for e in res.log] == [(0, "warmup"), (1, "main")]
    main = res.log[1]
    assert main["lr_multiplier"] == 1.0
    assert set(main["loss"]) == {"class", "conc", "orth", "equiv", "pres", "total"}
    assert all(np.isfinite(v) for v in main["loss"].values())
    assert set(main["eval"]) == {"accuracy_pct", "nmi", "ari"}


def test_different_seed_changes_run(data):
    a = run_short(data, 0).model.state_dict()
    b = run_short(data, 1).model.state_dict()
    assert not np.array_equal(a["modulation"], b["modulation"])


def test_non_finite_parameters_stop_training(data):
    m = tiny_model()
    m.params["head.prototypes"].data[0, 0] = np.nan
    with pytest.raises(T.TrainingDiverged):
        T.train(m, data[:16], T.TrainConfig(epochs=1))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        T.train(tiny_model(), [], T.TrainConfig())


# -- warm-up helpers -------------------------------------------------------------------------


def test_feature_calibration_preserves_pooled_logits(data):
    m = tiny_model()
    images, *_ = G.stack(data[:8])

    def pooled_logits():
        with ag.no_grad():
            z = m.backbone(ag.Tensor(images)).data
        return z.mean(axis=(2, 3)) @ m.classifier.data.T, z

    before, _ = pooled_logits()
    T.calibrate_feature_scale(m, images, target=2.0)
    after, z = pooled_logits()
    np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-12)
    assert np.mean(np.sum(z * z, axis=1)) == pytest.approx(2.0, rel=1e-9)


def test_evaluate_reports_metrics(data):
    res = T.evaluate(tiny_model(), data[:16], data[16:])
    assert 0 <= res["accuracy_pct"] <= 100
    assert res["attention"].shape == (16, 4, 16, 16)
    assert np.isfinite(res["keypoint_error_pct"])
    assert len(res["per_part_presence_histogram"]) == 3
