import json

import numpy as np
import pytest

from mstn.errors import ConfigError, DataError, DegenerateError, DimensionError, NumericError
from mstn.functional import softmax_lastdim
from mstn.gradcheck import finite_diff_grad, rel_error
from mstn.tensor import Tensor
from mstn.training import (OptimizerState, TrainConfig, adamw_step, cross_entropy, fit, focal_loss,
                           mae_metric, masked_mse_loss, mse_loss)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --------------------------------------------------------------------- focal
def test_focal_reduces_to_cross_entropy(np_rng):
    for _ in range(100):
        B, C = np_rng.integers(1, 6), np_rng.integers(2, 6)
        logits = Tensor(np_rng.standard_normal((B, C)) * 3, dtype=np.float64)
        y = np_rng.integers(0, C, B)
        assert abs(focal_loss(logits, y, gamma=0, alpha=1).item() - cross_entropy(logits, y).item()) < 1e-6


@pytest.mark.parametrize("gamma, alpha", [(0.0, 1.0), (2.0, 0.25), (1.0, 0.5)])
def test_focal_uniform_two_class(gamma, alpha):
    loss = focal_loss(Tensor(np.zeros((1, 2)), dtype=np.float64), [1], gamma, alpha).item()
    assert loss == pytest.approx(alpha * 0.5 ** gamma * np.log(2), abs=1e-12)


def test_focal_confident_correct_is_near_zero():
    assert focal_loss(Tensor(np.array([[50.0, 0.0]]), dtype=np.float64), [0]).item() < 1e-20


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
def test_focal_non_increasing_in_p_t(gamma):
    p_t = np.linspace(0.01, 0.99, 60)
    # two-class logits [log p, log(1-p)] give p_t = p for target 0
    logits = np.stack([np.log(p_t), np.log1p(-p_t)], axis=1)
    losses = [focal_loss(Tensor(row[None], dtype=np.float64), [0], gamma, 0.25).item() for row in logits]
    assert np.all(np.diff(losses) <= 1e-15)


def test_focal_grad(np_rng):
    x = leaf(np_rng.standard_normal((4, 3)))
    y = [0, 2, 1, 2]
    f = lambda: focal_loss(x, y)
    f().backward()
    assert rel_error(x.grad, finite_diff_grad(f, x)) < 1e-6


def test_focal_bad_target():
    with pytest.raises(IndexError):
        focal_loss(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("gamma, alpha", [(-1.0, 0.5), (2.0, 0.0), (2.0, 1.5)])
def test_focal_bad_hyperparameters(gamma, alpha):
    with pytest.raises(ConfigError):
        focal_loss(Tensor(np.zeros((1, 2))), [0], gamma, alpha)


def test_cross_entropy_matches_direct(np_rng):
    logits = np_rng.standard_normal((5, 4))
    y = np_rng.integers(0, 4, 5)
    p = softmax_lastdim(Tensor(logits, dtype=np.float64)).data
    assert cross_entropy(Tensor(logits, dtype=np.float64), y).item() == pytest.approx(
        -np.log(p[np.arange(5), y]).mean(), abs=1e-12)


# ----------------------------------------------------------------------- mse
def test_mse_and_mae_examples():
    pred, target = Tensor(np.zeros(2), dtype=np.float64), np.array([1.0, 3.0])
    assert mse_loss(pred, target).item() == 5.0
    assert mae_metric(pred, target) == 2.0
    assert mse_loss(Tensor(target), target).item() == 0.0


def test_mse_grad(np_rng):
    x = leaf(np_rng.standard_normal((3, 4)))
    t = np_rng.standard_normal((3, 4))
    mse_loss(x, t).backward()
    np.testing.assert_allclose(x.grad, 2 * (x.data - t) / 12, atol=1e-15)
    assert rel_error(x.grad, finite_diff_grad(lambda: mse_loss(x, t), x)) < 1e-8


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        mse_loss(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(DimensionError):
        mae_metric(np.zeros(3), np.zeros(4))


def test_masked_mse_all_ones_equals_mse(np_rng):
    for _ in range(100):
        shape = tuple(np_rng.integers(1, 5, np_rng.integers(1, 4)))
        p = Tensor(np_rng.standard_normal(shape), dtype=np.float64)
        t = np_rng.standard_normal(shape)
        assert abs(masked_mse_loss(p, t, np.ones(shape)).item() - mse_loss(p, t).item()) < 1e-12


def test_masked_mse_single_cell():
    mask = np.zeros((2, 2))
    mask[1, 0] = 1
    pred = Tensor(np.array([[9.0, 9.0], [3.0, 9.0]]), dtype=np.float64)
    assert masked_mse_loss(pred, np.array([[0.0, 0.0], [1.0, 0.0]]), mask).item() == 4.0


def test_masked_mse_brute_force(np_rng):
    p, t = np_rng.standard_normal((4, 6, 2)), np_rng.standard_normal((4, 6, 2))
    m = (np_rng.random((4, 6, 2)) < 0.3).astype(float)
    total = sum((p[i] - t[i]) ** 2 for i in np.ndindex(p.shape) if m[i])
    assert masked_mse_loss(Tensor(p, dtype=np.float64), t, m).item() == pytest.approx(total / m.sum(), rel=1e-12)


def test_masked_mse_ignores_unmasked_and_grads_only_masked(np_rng):
    x = leaf(np_rng.standard_normal((3, 4)))
    t = np_rng.standard_normal((3, 4))
    m = (np_rng.random((3, 4)) < 0.5).astype(float)
    m[0, 0] = 1
    t2 = np.where(m == 1, t, 1e6)
    assert masked_mse_loss(x, t, m).item() == masked_mse_loss(x, t2, m).item()
    masked_mse_loss(x, t, m).backward()
    assert (x.grad[m == 0] == 0).all()


def test_masked_mse_empty_mask():
    with pytest.raises(DegenerateError):
        masked_mse_loss(Tensor(np.zeros(3)), np.zeros(3), np.zeros(3))


# ------------------------------------------------------------------- AdamW
def test_adamw_zero_grad_no_decay_leaves_params():
    p = {"w": leaf([1.0, -2.0])}
    p["w"].grad = np.zeros(2)
    adamw_step(p, OptimizerState(), TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_quadratic_converges():
    w = {"w": leaf([1.0])}
    state, cfg = OptimizerState(), TrainConfig(learning_rate=0.01, weight_decay=0.0)
    trail = []
    for _ in range(2000):
        w["w"].grad = 2 * w["w"].data
        adamw_step(w, state, cfg)
        trail.append(abs(w["w"].data[0]))
        if trail[-1] < 1e-3:
            break
    assert trail[-1] < 1e-3
    # |w| falls every step until it first crosses below 1e-2
    head = trail[:next(i for i, v in enumerate(trail) if v < 1e-2)]
    assert np.all(np.diff(head) < 0)


def test_adamw_matches_hand_rolled_adam():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    w = {"w": leaf([0.5, -1.5])}
    state = OptimizerState()
    ref = np.array([0.5, -1.5])
    m = v = np.zeros(2)
    grads = [np.array([1.0, -2.0]), np.array([0.5, 0.25]), np.array([-3.0, 1.0])]
    for t, g in enumerate(grads, start=1):
        w["w"].grad = g
        adamw_step(w, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w["w"].data, ref, rtol=1e-12)
    assert state.step == 3


def test_adamw_decay_is_decoupled():
    # zero gradient: only the decay term acts, p <- p * (1 - lr * wd)
    w = {"w": leaf([2.0])}
    w["w"].grad = np.zeros(1)
    adamw_step(w, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.5))
    assert w["w"].data[0] == pytest.approx(2.0 * (1 - 0.05))


@pytest.mark.parametrize("c", [1e-3, 1.0, 250.0])
def test_adamw_first_step_sign_invariant_to_grad_scale(c, np_rng):
    g = np_rng.standard_normal(10)
    steps = []
    for scale in (1.0, c):
        w = {"w": leaf(np.zeros(10))}
        w["w"].grad = g * scale
        adamw_step(w, OptimizerState(), TrainConfig(weight_decay=0.0))
        steps.append(np.sign(w["w"].data))
    np.testing.assert_array_equal(steps[0], steps[1])


def test_adamw_nan_names_parameter():
    p = {"conv1.weight": leaf([1.0]), "head.bias": leaf([1.0])}
    p["conv1.weight"].grad = np.zeros(1)
    p["head.bias"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="head.bias"):
        adamw_step(p, OptimizerState(), TrainConfig())
    assert p["conv1.weight"].data[0] == 1.0


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(betas=(0.9, 1.0)), dict(patience=0), dict(loss="hinge")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


# --------------------------------------------------------------------- fit
class Toy:
    """A single scalar parameter with the model protocol ``fit`` needs."""

    def __init__(self, w=1.0):
        self.params = {"w": leaf([w])}

    def zero_grad(self):
        self.params["w"].grad = None

    def snapshot(self):
        return {"w": self.params["w"].data.copy()}

    def load_state(self, arrays):
        self.params["w"].data = arrays["w"].copy()


def drifting(model, batch, train, rng):
    # training pushes w up; validation prefers w near 0, so val gets worse every epoch
    w = model.params["w"]
    return w * -1.0 if train else w * w


def test_fit_patience_one_stops_after_two_epochs():
    model = Toy()
    data = (np.zeros(4),)
    best, history = fit(model, data, data, TrainConfig(learning_rate=0.1, patience=1, weight_decay=0,
                                                       batch_size=4), lambda m, b, t, r: drifting(m, b, t, r).sum())
    assert len(history) == 2
    assert history[1].val_loss > history[0].val_loss
    assert model.params["w"].data[0] == pytest.approx(np.sqrt(history[0].val_loss))
    np.testing.assert_array_equal(best["w"], model.params["w"].data)


def quadratic(model, batch, train, rng):
    (target,) = batch
    d = model.params["w"] - Tensor(target[:, None])
    return (d * d).mean()


def test_fit_deterministic_history():
    data = (np.random.default_rng(0).standard_normal(50),)
    cfg = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=5, seed=3)
    a = fit(Toy(), data, data, cfg, quadratic)[1]
    b = fit(Toy(), data, data, cfg, quadratic)[1]
    assert [(r.train_loss, r.val_loss) for r in a] == [(r.train_loss, r.val_loss) for r in b]


def test_fit_returns_best_checkpoint():
    rng = np.random.default_rng(1)
    train, val = (rng.standard_normal(40) + 3,), (rng.standard_normal(10) - 3,)
    model = Toy(0.0)
    best, history = fit(model, train, val, TrainConfig(learning_rate=0.2, batch_size=8, max_epochs=30,
                                                       patience=3), quadratic)
    achieved = np.mean((best["w"][0] - val[0]) ** 2)
    assert achieved == pytest.approx(min(r.val_loss for r in history), rel=1e-12)
    assert len(history) < 30


def test_fit_history_json():
    data = (np.zeros(4),)
    _, history = fit(Toy(), data, data, TrainConfig(max_epochs=2), quadratic)
    assert set(json.loads(history[0].to_json())) == {"epoch", "train_loss", "val_loss", "seconds"}


def test_fit_empty_split():
    with pytest.raises(DataError):
        fit(Toy(), (np.zeros(0),), (np.zeros(3),), TrainConfig(), quadratic)
