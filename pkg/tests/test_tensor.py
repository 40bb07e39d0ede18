import numpy as np
import pytest
from hypothesis import given, strategies as st

from wsevo.tensor import (
    Activation, Conv2d, Flatten, FullyConnected, Model, NumericalError, ShapeMismatchError, TensorError,
    TrainConfig, TrainingError, as_tensor, backward, forward, loss_and_grads, predict, sgd_step, train,
)

from oracles import finite_difference_grads, grads_agree, random_small_model


class _Set:
    def __init__(self, x, target):
        self.x = np.asarray(x, np.float32)
        self.target = np.asarray(target, np.float32)


def fc_model(weights, bias, in_shape=None):
    weights = np.asarray(weights, np.float32).reshape(1, -1)
    n = weights.shape[1]
    layers = [Flatten(), FullyConnected(n, 1)] if in_shape else [FullyConnected(n, 1)]
    m = Model.build(layers, in_shape or (n,), rng=0)
    return m.with_params([weights, np.array([bias], np.float32)])


# -- forward ----------------------------------------------------------------

def test_forward_symmetric_cancellation():
    m = fc_model([1, 1, 1, 1], 0.0)
    assert forward(m, np.array([0.5, 0.5, -0.5, -0.5])) == 0.0


def test_forward_flatten_dot_product():
    m = fc_model([1, 0, 0, 0], 2.0, in_shape=(1, 2, 2))
    assert forward(m, np.array([[[3, 9], [9, 9]]], np.float32)) == 5.0


def test_forward_conv_then_sum():
    m = Model.build([Conv2d(1, 1, kernel=1, padding=0), Flatten(), FullyConnected(4, 1)], (1, 2, 2), rng=0)
    m = m.with_params([np.full((1, 1, 1, 1), 2, np.float32), np.zeros(1, np.float32),
                       np.ones((1, 4), np.float32), np.zeros(1, np.float32)])
    assert forward(m, np.ones((1, 2, 2), np.float32)) == 8.0


def test_forward_is_pure(rng):
    m = random_small_model(rng)
    x = rng.standard_normal(m.input_shape).astype(np.float32)
    a, b = forward(m, x), forward(m, x)
    assert np.float64(a).tobytes() == np.float64(b).tobytes()


def test_forward_shape_mismatch_names_layer():
    m = fc_model([1, 1], 0.0)
    with pytest.raises(ShapeMismatchError) as exc:
        forward(m, np.zeros(3))
    assert exc.value.layer_index == 0


def test_build_rejects_inconsistent_stack():
    with pytest.raises(ShapeMismatchError) as exc:
        Model.build([Flatten(), FullyConnected(5, 1)], (1, 2, 2))
    assert exc.value.layer_index == 1


def test_forward_nonfinite_intermediate_reports_layer():
    m = fc_model([3e38, 3e38], 0.0)
    with pytest.raises(NumericalError) as exc:
        forward(m, np.array([10.0, 10.0]))
    assert exc.value.layer_index == 0


def test_non_finite_input_rejected():
    with pytest.raises(TensorError):
        as_tensor([1.0, np.nan])
    with pytest.raises(TensorError):
        forward(fc_model([1.0], 0.0), np.array([np.inf]))


# -- activations ------------------------------------------------------------

@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_relu6_bounded_and_leaky_identity_on_positive(xs):
    x = np.array(xs, np.float32)[None]
    y6, _ = Activation("relu6").forward(x, [], {})
    assert y6.min() >= 0 and y6.max() <= 6
    yl, _ = Activation("leaky_relu", 0.1).forward(x, [], {})
    pos = x >= 0
    assert np.array_equal(yl[pos], x[pos])


def test_prelu_slope_receives_gradient():
    act = Activation("prelu", 0.25)
    x = np.array([[-2.0, 1.0]], np.float32)
    _, cache = act.forward(x, [np.array([0.25], np.float32)], {})
    _, (da,) = act.backward(np.ones_like(x), [np.array([0.25], np.float32)], cache)
    assert da[0] == -2.0


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1])
def test_slope_must_be_in_open_unit_interval(slope):
    with pytest.raises(ValueError):
        Activation("leaky_relu", slope)


# -- backward ---------------------------------------------------------------

def test_backward_zero_residual():
    m = fc_model([3.0], 0.0)
    loss, grads = loss_and_grads(m, np.array([2.0]), 6.0)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_backward_hand_chain_rule():
    m = fc_model([1.0], 0.0)
    dw, db = backward(m, np.array([2.0]), 0.0)
    assert dw[0, 0] == 8.0  # 2 * y_hat * x
    assert db[0] == 4.0


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_small_model(rng)
    for _ in range(10):
        x = rng.standard_normal((2,) + m.input_shape).astype(np.float32)
        t = rng.standard_normal(2)
        numeric, kink = finite_difference_grads(m, x, t)
        if not kink:
            break
    else:
        pytest.skip("could not draw a kink-free input")
    ok, worst = grads_agree(backward(m, x, t), numeric)
    assert ok, worst


# -- sgd / train ------------------------------------------------------------

@pytest.mark.parametrize("w,g,lr,wd,expected", [
    (1.0, 0.0, 0.3, 0.0, 1.0),
    (2.0, 1.0, 0.1, 0.0, 1.9),
    (2.0, 0.0, 0.1, 0.05, 1.99),
])
def test_sgd_step_formula(w, g, lr, wd, expected):
    m = fc_model([w], 0.0)
    new = sgd_step(m, [np.array([[g]], np.float32), np.zeros(1, np.float32)],
                   TrainConfig(learning_rate=lr, weight_decay=wd))
    assert new.params[0][0, 0] == pytest.approx(expected, abs=1e-6)
    assert m.params[0][0, 0] == w  # input model untouched


def test_sgd_step_decay_only():
    # w=2, g=0, lr=0.1, wd=0.5 -> 1.9 (weight_decay bound raised to admit 0.5)
    m = fc_model([2.0], 0.0)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5, max_weight_decay=1.0)
    new = sgd_step(m, [np.zeros((1, 1), np.float32), np.zeros(1, np.float32)], cfg)
    assert new.params[0][0, 0] == pytest.approx(1.9, abs=1e-6)


def test_sgd_step_shape_mismatch():
    m = fc_model([1.0], 0.0)
    with pytest.raises(ShapeMismatchError):
        sgd_step(m, [np.zeros((2, 1), np.float32), np.zeros(1, np.float32)], TrainConfig())


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(learning_rate=2.0), dict(weight_decay=0.2),
                                dict(batch_size=0), dict(seed=-1)])
def test_train_config_bounds(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_zero_epochs_returns_model():
    m = fc_model([0.5], 0.0)
    assert train(m, _Set([[1.0]], [1.0]), TrainConfig(epochs=0)) is m


def test_train_single_sample_converges():
    m = fc_model([0.0], 0.0)
    data = _Set([[2.0]], [6.0])
    out = train(m, data, TrainConfig(learning_rate=0.05, epochs=200, batch_size=1))
    assert (predict(out, data.x)[0] - 6.0) ** 2 < 1e-6


def test_train_is_deterministic(rng):
    m = random_small_model(rng)
    x = rng.standard_normal((12,) + m.input_shape).astype(np.float32)
    data = _Set(x, rng.standard_normal(12))
    cfg = TrainConfig(learning_rate=0.01, epochs=3, batch_size=4, seed=99)
    a, b = train(m, data, cfg), train(m, data, cfg)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.params, b.params))


def test_train_divergence_reports_position():
    m = fc_model([1.0], 0.0)
    data = _Set([[1e3], [1e3]], [0.0, 0.0])
    with pytest.raises(TrainingError) as exc:
        train(m, data, TrainConfig(learning_rate=1.0, epochs=50, batch_size=1))
    assert exc.value.epoch >= 0 and exc.value.batch >= 0
