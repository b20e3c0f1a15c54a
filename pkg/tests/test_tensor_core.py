import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepguide import tensor_core as tc

from fragments import LAYER_FRAGMENTS


def t64(x):
    return tc.Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_scalar_scaling():
    out = tc.conv2d(t64(np.ones((1, 3, 3))), t64(np.full((1, 1, 1, 1), 2.0)),
                    t64(np.zeros(1)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_hand_sum():
    x = t64([[[1.0, 2.0], [3.0, 4.0]]])
    k = t64(np.ones((1, 1, 2, 2)))
    out = tc.conv2d(x, k, t64(np.zeros(1)))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 10.0


def test_conv_zero_kernels_broadcast_bias():
    rng = np.random.default_rng(3)
    x = t64(rng.normal(size=(2, 5, 5)))
    k = t64(np.zeros((3, 2, 3, 3)))
    b = t64([1.0, -2.0, 0.5])
    out = tc.conv2d(x, k, b, stride=1, padding=1)
    assert out.data.shape == (3, 5, 5)
    for c, bias in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out.data[c] == bias)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(tc.ShapeError):
        tc.conv2d(t64(np.zeros((2, 4, 4))), t64(np.zeros((1, 3, 2, 2))),
                  t64(np.zeros(1)))


@given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 3),
       stride=st.integers(1, 3), padding=st.integers(0, 2))
@settings(max_examples=60, deadline=None)
def test_conv_output_shape_formula(h, w, k, stride, padding):
    x = t64(np.zeros((1, h, w)))
    kern = t64(np.zeros((2, 1, k, k)))
    out = tc.conv2d(x, kern, t64(np.zeros(2)), stride=stride, padding=padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    assert out.data.shape == (2, ho, wo)


def test_conv_batched_matches_single():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 2, 6, 6))
    k = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    batched = tc.conv2d(t64(x), k, b, stride=2, padding=1).data
    for n in range(4):
        single = tc.conv2d(t64(x[n]), k, b, stride=2, padding=1).data
        assert np.array_equal(batched[n], single)


# ---------------------------------------------------------------------------
# lstm_step
# ---------------------------------------------------------------------------

def _zero_lstm_weights(d, m):
    return (t64(np.zeros((d, 4 * m))), t64(np.zeros((m, 4 * m))),
            t64(np.zeros(4 * m)))


def test_lstm_zero_everything():
    wx, wh, b = _zero_lstm_weights(1, 1)
    h2, c2 = tc.lstm_step(t64([0.0]), t64([0.0]), t64([0.0]), wx, wh, b)
    assert h2.data[0] == 0.0 and c2.data[0] == 0.0


def test_lstm_zero_weights_unit_cell():
    # all gates sit at 0.5, candidate at 0: c' = 0.5*1, h' = 0.5*tanh(0.5)
    wx, wh, b = _zero_lstm_weights(1, 1)
    h2, c2 = tc.lstm_step(t64([0.0]), t64([0.0]), t64([1.0]), wx, wh, b)
    assert c2.data[0] == pytest.approx(0.5, abs=1e-15)
    assert h2.data[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-12)


def test_lstm_deterministic():
    rng = np.random.default_rng(7)
    wx = t64(rng.normal(size=(3, 8)))
    wh = t64(rng.normal(size=(2, 8)))
    b = t64(rng.normal(size=8))
    args = (t64(rng.normal(size=3)), t64(rng.normal(size=2)),
            t64(rng.normal(size=2)))
    h1, c1 = tc.lstm_step(*args, wx, wh, b)
    h2, c2 = tc.lstm_step(*args, wx, wh, b)
    assert np.array_equal(h1.data, h2.data) and np.array_equal(c1.data, c2.data)


def test_lstm_dimension_mismatch():
    wx, wh, b = _zero_lstm_weights(2, 3)
    with pytest.raises(tc.ShapeError):
        tc.lstm_step(t64([0.0]), t64(np.zeros(3)), t64(np.zeros(3)), wx, wh, b)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_softmax():
    loss, grad = tc.softmax_cross_entropy_value_and_grad(
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert grad == pytest.approx([-2 / 3, 1 / 3, 1 / 3], abs=1e-12)


def test_ce_matched_uniform():
    loss, grad = tc.softmax_cross_entropy_value_and_grad(
        [0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3])
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert np.allclose(grad, 0.0, atol=1e-15)


def test_ce_derived_value():
    # direct evaluation: p = softmax(1,0,0) = (e,1,1)/(e+2)
    e = math.e
    expected = -(2 / 3 * math.log(e / (e + 2)) + 1 / 3 * math.log(1 / (e + 2)))
    loss, _ = tc.softmax_cross_entropy_value_and_grad(
        [1.0, 0.0, 0.0], [2 / 3, 1 / 3, 0.0])
    assert loss == pytest.approx(expected, abs=1e-12)


def test_ce_rejects_nonfinite():
    with pytest.raises(ValueError):
        tc.softmax_cross_entropy_value_and_grad([np.nan, 0.0, 0.0], [1, 0, 0])


@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3))
@settings(max_examples=100, deadline=None)
def test_softmax_is_distribution(logits):
    p = tc.softmax(np.array(logits))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6


def test_ce_bounded_below_by_target_entropy():
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = rng.dirichlet(np.ones(3))
        z = rng.normal(scale=3, size=3)
        loss, _ = tc.softmax_cross_entropy_value_and_grad(z, t)
        entropy = -np.sum(t[t > 0] * np.log(t[t > 0]))
        assert loss >= entropy - 1e-12
    # equality when softmax(logits) == target
    t = np.array([0.5, 0.3, 0.2])
    loss, _ = tc.softmax_cross_entropy_value_and_grad(np.log(t), t)
    entropy = -np.sum(t * np.log(t))
    assert loss == pytest.approx(entropy, abs=1e-12)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_relu_mask():
    x = tc.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    loss = tc.tsum(tc.relu(x))
    tc.backward(loss)
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_backward_before_forward_rejected():
    with pytest.raises(tc.UsageError):
        tc.backward(tc.Tensor(np.array(1.0)))


def test_backward_zero_upstream():
    store = tc.ParamStore(dtype=np.float64)
    w = store.add("w", np.random.default_rng(0).normal(size=(3, 2)))
    x = tc.Tensor(np.ones((1, 3)))
    loss = tc.mul(tc.tsum(tc.matmul(x, w)), 0.0)
    store.backward(loss)
    assert np.array_equal(w.grad, np.zeros((3, 2)))


def test_backward_unreachable_params_zeroed():
    store = tc.ParamStore(dtype=np.float64)
    used = store.add("used", [1.0, 2.0])
    unused = store.add("unused", [3.0])
    loss = tc.tsum(tc.mul(used, 2.0))
    store.backward(loss)
    assert np.array_equal(used.grad, [2.0, 2.0])
    assert np.array_equal(unused.grad, [0.0])


def test_backward_composite_matches_finite_differences():
    # dense -> softmax-CE on a random 4-dim input, finite-difference oracle
    rng = np.random.default_rng(42)
    store = tc.ParamStore(dtype=np.float64)
    x = store.add("x", rng.normal(size=(1, 4)))
    w = store.add("w", rng.normal(size=(4, 3)))
    b = store.add("b", rng.normal(size=3))
    target = rng.dirichlet(np.ones(3), size=1)

    def loss_fn():
        return tc.softmax_cross_entropy(tc.dense(x, w, b), target)

    report = tc.grad_check(loss_fn, store, tolerance=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    store = tc.ParamStore(dtype=np.float64)
    p = store.add("p", [1.0, -2.0, 3.0])
    p.grad = np.zeros(3)
    before = p.data.copy()
    tc.adam_step(store, tc.AdamConfig())
    assert np.array_equal(p.data, before)
    assert store.t == 1


def test_adam_first_step_delta():
    store = tc.ParamStore(dtype=np.float64)
    p = store.add("p", [0.0])
    p.grad = np.array([1.0])
    cfg = tc.AdamConfig(learning_rate=1e-4)
    tc.adam_step(store, cfg)
    expected = -cfg.learning_rate / (1.0 + cfg.epsilon)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_adam_symmetry():
    store = tc.ParamStore(dtype=np.float64)
    a = store.add("a", [1.0])
    b = store.add("b", [1.0])
    for _ in range(3):
        a.grad = np.array([0.7])
        b.grad = np.array([0.7])
        tc.adam_step(store, tc.AdamConfig(learning_rate=1e-2))
    assert a.data[0] == b.data[0]


def test_adam_nan_gradient_names_parameter():
    store = tc.ParamStore(dtype=np.float64)
    p = store.add("offender", [1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="offender"):
        tc.adam_step(store, tc.AdamConfig())


def test_adam_increments_t_and_leaves_grads():
    store = tc.ParamStore(dtype=np.float64)
    p = store.add("p", [1.0])
    p.grad = np.array([0.5])
    tc.adam_step(store, tc.AdamConfig())
    tc.adam_step(store, tc.AdamConfig())
    assert store.t == 2
    assert np.array_equal(p.grad, [0.5])


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    store = tc.ParamStore(dtype=np.float64)
    x = store.add("x", [3.0])

    def loss_fn():
        return tc.tsum(tc.mul(x, x))

    report = tc.grad_check(loss_fn, store, tolerance=1e-9)
    assert report.passed
    assert report.per_param["x"] < 1e-9


@pytest.mark.parametrize("name", sorted(LAYER_FRAGMENTS))
def test_grad_check_layer_fragments(name):
    loss_fn, store = LAYER_FRAGMENTS[name](seed=0)
    report = tc.grad_check(loss_fn, store, tolerance=1e-5)
    assert report.passed, f"{name}:\n{report}"


def test_grad_check_failure_is_reported_not_raised():
    store = tc.ParamStore(dtype=np.float64)
    x = store.add("x", [2.0])

    def loss_fn():
        return tc.tsum(tc.mul(x, x))

    # an unreachable tolerance must yield passed=False, not an exception
    report = tc.grad_check(loss_fn, store, tolerance=1e-30)
    assert not report.passed


def test_tensor_data_length_matches_shape():
    t = tc.Tensor(np.zeros((3, 4, 5)))
    assert t.data.size == 3 * 4 * 5
