"""Losses, optimizer and the teacher/student training loops."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beaa.data import Dataset, synthetic_dataset
from beaa.model import build_sequential
from beaa.training import (
    METRIC_COLUMNS,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    kd_loss,
    l2_penalty,
    nesterov_step,
    read_metrics_csv,
    regularized_grad,
    softmax_with_temperature,
    train,
    train_student,
    train_teacher,
    write_metrics_csv,
)
from gradcheck import probe_gradients

BLOCKS = [("conv", 4, 3, 1), ("act",), ("bn",), ("pool", 2), ("conv", 3, 1, 0), ("act",), ("gap",)]


def tiny_net(act="element", seed=0):
    return build_sequential((2, 4, 4), 3, BLOCKS, act, seed=seed, coeff_noise=0.05)


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset(96, 32, 32, 3, (2, 4, 4), noise=0.8, seed=1)


# -- softmax / losses -----------------------------------------------------
def test_softmax_properties():
    z = np.random.default_rng(0).normal(size=(5, 4)) * 3
    e = np.exp(z - z.max(axis=1, keepdims=True))
    assert np.allclose(softmax_with_temperature(z, 1.0), e / e.sum(axis=1, keepdims=True),
                       rtol=0, atol=1e-15)
    assert np.allclose(softmax_with_temperature(np.array([2.0, 0.0]), 100.0), 0.5, atol=1e-2)
    assert np.all(np.abs(softmax_with_temperature(z, 3.0).sum(axis=1) - 1) < 1e-12)
    with pytest.raises(ValueError):
        softmax_with_temperature(np.array([np.inf, 0.0]), 1.0)
    with pytest.raises(ValueError):
        softmax_with_temperature(z, 0.0)


def test_kd_without_teacher_is_cross_entropy():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    rep, _ = kd_loss(s, rng.normal(size=(6, 4)), y, 3.0, 0.0)
    assert rep.total_loss == cross_entropy(s, y)
    rep2, _ = kd_loss(s, None, y)
    assert rep2.total_loss == rep2.hard_loss == cross_entropy(s, y) and rep2.distill_loss == 0


def test_kd_uniform_targets_give_ln2():
    rep, _ = kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), np.array([0]), 2.0, 0.5)
    assert abs(rep.distill_loss - math.log(2)) < 1e-15


def test_kd_alpha_one_t2_is_four_times_distill():
    rng = np.random.default_rng(2)
    s, t, y = rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), rng.integers(0, 5, 3)
    rep, _ = kd_loss(s, t, y, 2.0, 1.0)
    # independent scalar computation of the soft cross entropy
    ref = 0.0
    for i in range(3):
        q = [math.exp(v / 2) for v in t[i]]
        q = [v / sum(q) for v in q]
        lse = math.log(sum(math.exp(v / 2) for v in s[i]))
        ref -= sum(qj * (s[i][j] / 2 - lse) for j, qj in enumerate(q))
    assert abs(rep.distill_loss - ref / 3) < 1e-12
    assert rep.total_loss == 4 * rep.distill_loss


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0, 1), T=st.floats(1, 20), seed=st.integers(0, 2**16))
def test_kd_decomposition_exact(alpha, T, seed):
    rng = np.random.default_rng(seed)
    s, t, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    rep, _ = kd_loss(s, t, y, T, alpha)
    assert rep.total_loss == alpha * T * T * rep.distill_loss + (1 - alpha) * rep.hard_loss


@pytest.mark.parametrize("alpha,T", [(0.0, 1.0), (0.5, 4.0), (1.0, 2.0), (0.3, 7.5)])
def test_kd_gradient_matches_finite_differences(alpha, T):
    rng = np.random.default_rng(3)
    s, t, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    _, g = kd_loss(s, t, y, T, alpha)
    h = 1e-6
    num = np.zeros_like(s)
    for idx in np.ndindex(*s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        num[idx] = (kd_loss(sp, t, y, T, alpha)[0].total_loss
                    - kd_loss(sm, t, y, T, alpha)[0].total_loss) / (2 * h)
    assert np.max(np.abs(g - num)) < 1e-8


def test_kd_shape_errors():
    with pytest.raises(ValueError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), np.array([0, 1]), 1.0, 0.5)
    with pytest.raises(ValueError):
        kd_loss(np.zeros((2, 3)), None, np.array([0]), 1.0, 0.5)


# -- regularization / optimizer -------------------------------------------
def test_regularized_grad_examples():
    g = np.array([0.3, -1.0])
    assert np.array_equal(regularized_grad(g, np.array([5.0, 6.0]), 0.0), g)
    assert abs(regularized_grad(np.array(1.0), np.array(2.0), 0.1) - 1.2) < 1e-15
    c, lam, h = np.array([0.7, -1.3, 2.0]), 0.05, 1e-6
    for i in range(3):
        cp, cm = c.copy(), c.copy()
        cp[i] += h
        cm[i] -= h
        fd = (l2_penalty(cp, lam) - l2_penalty(cm, lam)) / (2 * h)
        assert abs(regularized_grad(np.zeros(3), c, lam)[i] - fd) < 1e-8
    with pytest.raises(ValueError):
        regularized_grad(np.zeros(2), np.zeros(3), 0.1)


def test_nesterov_momentum_zero_is_sgd():
    c = {"c": np.array([1.0, -2.0])}
    new, _, _ = nesterov_step(OptimizerState(), c, lambda p: {"c": 2 * p["c"]}, 0.1, 0.0)
    assert np.array_equal(new["c"], c["c"] - 0.1 * 2 * c["c"])


def test_nesterov_first_step_and_lookahead():
    seen = []

    def grad(p):
        seen.append(p["c"].copy())
        return {"c": p["c"]}

    c = {"c": np.array([3.0])}
    c1, s1, _ = nesterov_step(OptimizerState(), c, grad, 0.1, 0.9)
    assert np.array_equal(s1.velocity["c"], [-0.1 * 3.0]) and np.array_equal(c1["c"], [3.0 - 0.1 * 3.0])
    c2, s2, _ = nesterov_step(s1, c1, grad, 0.1, 0.9)
    assert np.allclose(seen[1], 2.7 + 0.9 * -0.3)  # gradient at the look-ahead point
    assert np.allclose(s2.velocity["c"], 0.9 * -0.3 - 0.1 * seen[1])
    assert s2.step == 2


def test_nesterov_quadratic_bowl_converges():
    c, s = {"c": np.array([1.0, -3.0, 0.5])}, OptimizerState()
    for step in range(200):
        c, s, _ = nesterov_step(s, c, lambda p: {"c": p["c"]}, 0.1, 0.9)
        if np.max(np.abs(c["c"])) < 1e-6:
            break
    assert np.max(np.abs(c["c"])) < 1e-6 and step < 200


def test_config_validation_and_dict():
    cfg = TrainConfig(epochs=3, temperature=2.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(learning_rate=0), dict(momentum=1.0), dict(temperature=0.5),
                dict(distill_alpha=1.5), dict(reg_lambda=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})


# -- network gradients ----------------------------------------------------
@pytest.mark.parametrize("act", ["layer", "channel", "element"])
def test_two_layer_gradient_check(act):
    rng = np.random.default_rng(4)
    net = build_sequential((2, 4, 4), 3, [("conv", 3, 3, 1), ("act",), ("bn",), ("conv", 3, 1, 0),
                                          ("act",), ("gap",)], act, seed=5, coeff_noise=0.2)
    errs = probe_gradients(net, rng.normal(size=(3, 2, 4, 4)), 60, rng)
    assert max(e for _, e in errs) < 1e-4


# -- training loops -------------------------------------------------------
def separable_dataset(n=120, seed=0):
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(1, 3, 3))

    def draw(k):
        y = rng.integers(0, 2, k)
        x = np.where(y[:, None, None, None] == 1, 1.0, -1.0) * direction[None] * 2
        return x + rng.normal(0, 0.3, size=(k, 1, 3, 3)), y

    (a, b), (c, d), (e, f) = draw(n), draw(20), draw(20)
    return Dataset(a, b, c, d, e, f, 2)


def test_teacher_fits_separable_set():
    net = build_sequential((1, 3, 3), 2, [("conv", 4, 3, 1), ("act",), ("conv", 2, 1, 0),
                                          ("gap",)], "relu", seed=0)
    ds = separable_dataset()
    trained, rows = train_teacher(net, ds, TrainConfig(epochs=15, batch_size=16,
                                                       learning_rate=0.05))
    assert rows[-1]["train_acc"] >= 0.95
    assert rows[-1]["total_loss"] < rows[0]["total_loss"]


def test_training_is_deterministic(data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=3, augment=False)
    _, a = train_student(tiny_net(), data, cfg, metrics_path=tmp_path / "a.csv")
    _, b = train_student(tiny_net(), data, cfg, metrics_path=tmp_path / "b.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "epoch_seconds"} for r in rows]
    assert strip(a) == strip(b)
    assert strip(read_metrics_csv(tmp_path / "a.csv")) == strip(a)


def test_zero_epochs_returns_initialization(data):
    net = tiny_net()
    out, rows = train(net, data, TrainConfig(epochs=0))
    assert rows == []
    for k, v in net.parameters().items():
        assert np.array_equal(out.parameters()[k], v)


def test_student_coefficients_move(data):
    net = tiny_net()
    out, _ = train_student(net, data, TrainConfig(epochs=1, batch_size=16))
    for k, v in net.parameters().items():
        if k.endswith(".coeffs"):
            assert not np.array_equal(out.parameters()[k], v), k


def test_student_without_kd_equals_alpha_zero(data):
    cfg = TrainConfig(epochs=1, batch_size=32, distill_alpha=0.0, temperature=1.0)
    teacher = tiny_net("relu", seed=9)
    a, ra = train_student(tiny_net(), data, cfg)
    b, rb = train_student(tiny_net(), data, cfg, teacher=teacher)
    assert ra[0]["total_loss"] == rb[0]["total_loss"] == ra[0]["hard_loss"]
    for k, v in a.parameters().items():
        assert np.array_equal(b.parameters()[k], v)


def test_student_kd_uses_both_terms(data):
    teacher, _ = train_teacher(tiny_net("relu", seed=4), data, TrainConfig(epochs=2, batch_size=16))
    _, rows = train_student(tiny_net(), data, TrainConfig(epochs=1, batch_size=16), teacher)
    r = rows[0]
    assert r["hard_loss"] > 0 and r["distill_loss"] > 0
    assert r["total_loss"] != r["hard_loss"]


def test_bn_running_stats_update(data):
    net = tiny_net()
    out, _ = train_student(net, data, TrainConfig(epochs=1, batch_size=32))
    assert not np.array_equal(out.buffers()["bn1.running_mean"], net.buffers()["bn1.running_mean"])


def test_role_checks(data):
    with pytest.raises(ValueError):
        train_teacher(tiny_net("element"), data, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_student(tiny_net("relu"), data, TrainConfig(epochs=1))
    wrong = build_sequential((2, 4, 4), 2, [("conv", 2, 1, 0), ("act",), ("gap",)], "relu")
    with pytest.raises(ValueError):
        train_student(tiny_net(), data, TrainConfig(epochs=1), teacher=wrong)


def test_divergence_reported(data):
    cfg = TrainConfig(epochs=3, learning_rate=1e6, grad_clip=None, batch_size=16)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        train_student(tiny_net(), data, cfg)


def test_metrics_csv_columns(tmp_path):
    rows = [{"epoch": 1, "hard_loss": 0.5, "distill_loss": 0.0, "total_loss": 0.5,
             "train_acc": 0.25, "val_acc": 0.125, "epoch_seconds": 1.0}]
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert open(tmp_path / "m.csv").readline().strip().split(",") == list(METRIC_COLUMNS)
    assert read_metrics_csv(tmp_path / "m.csv") == rows


def test_augmentation_deterministic(data):
    cfg = TrainConfig(epochs=1, batch_size=16, augment=True, seed=5)
    a, _ = train_student(tiny_net(), data, cfg)
    b, _ = train_student(tiny_net(), data, cfg)
    for k, v in a.parameters().items():
        assert np.array_equal(b.parameters()[k], v)
