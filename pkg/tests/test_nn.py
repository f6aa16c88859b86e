import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflkit.errors import ShapeError, StateError
from vflkit.nn import (
    Activation,
    ModelSegment,
    SegmentSpec,
    finite_diff_gradcheck,
    init_segment,
    matrix_from_bytes,
    matrix_to_bytes,
    softmax_cross_entropy,
)

RELU = Activation.RELU
IDENT = Activation.IDENTITY


def spec(dims, acts=None):
    if acts is None:
        acts = [RELU] * (len(dims) - 2) + [IDENT]
    return SegmentSpec.from_dims(dims, acts)


# ---------------------------------------------------------------------------
# init_segment
# ---------------------------------------------------------------------------


def test_init_uniform_bound():
    seg = init_segment(spec([392, 64], [RELU]), seed=7)
    w = seg.layers[0].weights
    bound = 1.0 / np.sqrt(392)  # 0.050507...
    assert w.shape == (64, 392)
    assert np.all(np.abs(w) <= bound)
    assert np.abs(w).max() > 0.9 * bound  # actually fills the range
    assert bound == pytest.approx(0.050507, abs=1e-6)


def test_init_biases_zero_and_chain():
    seg = init_segment(spec([128, 500, 10]), seed=0)
    assert len(seg.layers) == 2
    for layer in seg.layers:
        assert np.all(layer.bias == 0.0)


def test_init_deterministic():
    s = spec([17, 9, 4])
    a = init_segment(s, seed=123)
    b = init_segment(s, seed=123)
    for (wa, ba), (wb, bb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(wa, wb)
        assert np.array_equal(ba, bb)
    c = init_segment(s, seed=124)
    assert not np.array_equal(a.layers[0].weights, c.layers[0].weights)


def test_invalid_dim_chain_rejected():
    with pytest.raises(ValueError):
        SegmentSpec(((4, 8), (9, 2)), (RELU, IDENT))
    with pytest.raises(ValueError):
        SegmentSpec((), ())


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_shapes_owner_segment():
    seg = init_segment(spec([392, 64], [RELU]), seed=1)
    x = np.random.default_rng(1).random((128, 392))
    out = seg.forward(x)
    assert out.shape == (128, 64)


def test_forward_zero_weights_relu():
    seg = init_segment(spec([5, 3], [RELU]), seed=0)
    seg.layers[0].weights[:] = 0.0
    out = seg.forward(np.random.default_rng(0).random((4, 5)))
    assert np.all(out == 0.0)


def test_forward_identity_layer():
    seg = init_segment(spec([2, 2], [IDENT]), seed=0)
    seg.layers[0].weights[:] = np.eye(2)
    out = seg.forward(np.array([[1.0, -1.0]]))
    assert np.array_equal(out, [[1.0, -1.0]])


def test_forward_shape_mismatch():
    seg = init_segment(spec([5, 3], [RELU]), seed=0)
    with pytest.raises(ShapeError):
        seg.forward(np.zeros((2, 4)))


@settings(max_examples=40, deadline=None)
@given(
    dims=st.lists(st.integers(1, 12), min_size=2, max_size=4),
    batch=st.integers(1, 9),
    seed=st.integers(0, 2**31),
)
def test_forward_shape_algebra(dims, batch, seed):
    seg = init_segment(spec(dims), seed=seed)
    x = np.random.default_rng(seed).random((batch, dims[0]))
    assert seg.forward(x).shape == (batch, dims[-1])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_shapes():
    seg = init_segment(spec([392, 64], [RELU]), seed=3)
    x = np.random.default_rng(3).random((128, 392))
    seg.forward(x)
    grad_in = seg.backward(np.random.default_rng(4).random((128, 64)))
    assert grad_in.shape == (128, 392)


def test_backward_requires_forward():
    seg = init_segment(spec([4, 2], [IDENT]), seed=0)
    with pytest.raises(StateError):
        seg.backward(np.zeros((1, 2)))


def test_relu_blocks_gradient_on_negative_preactivation():
    seg = init_segment(spec([1, 1], [RELU]), seed=0)
    seg.layers[0].weights[:] = 1.0
    seg.forward(np.array([[-2.0]]))  # preactivation -2 < 0
    grad_in = seg.backward(np.array([[1.0]]))
    assert grad_in[0, 0] == 0.0
    assert seg.layers[0].grad_weights[0, 0] == 0.0


def test_identity_layer_grad_input_is_grad_times_weights():
    rng = np.random.default_rng(42)
    seg = init_segment(spec([3, 3], [IDENT]), seed=5)
    x = rng.random((3, 3))
    g = rng.random((3, 3))
    seg.forward(x)
    grad_in = seg.backward(g)
    assert np.allclose(grad_in, g @ seg.layers[0].weights, rtol=1e-12)


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def test_sgd_step_definition():
    seg = init_segment(spec([1, 1], [IDENT]), seed=0)
    layer = seg.layers[0]
    layer.weights[:] = 1.0
    layer.grad_weights[:] = 0.5
    seg.sgd_step(0.1)
    assert layer.weights[0, 0] == pytest.approx(0.95)
    assert layer.grad_weights[0, 0] == 0.0
    assert layer.cached_input is None


def test_sgd_step_zero_lr_no_change():
    seg = init_segment(spec([4, 3], [RELU]), seed=9)
    before = seg.copy_parameters()
    seg.forward(np.random.default_rng(0).random((2, 4)))
    seg.backward(np.ones((2, 3)))
    seg.sgd_step(0.0)
    for (w0, b0), layer in zip(before, seg.layers):
        assert np.array_equal(w0, layer.weights)
        assert np.array_equal(b0, layer.bias)


def test_distinct_learning_rates_apply():
    owner = init_segment(spec([2, 2], [IDENT]), seed=1)
    scientist = init_segment(spec([2, 2], [IDENT]), seed=1)
    for seg in (owner, scientist):
        seg.layers[0].grad_weights[:] = 1.0
    w0 = owner.layers[0].weights.copy()
    owner.sgd_step(0.01)
    scientist.sgd_step(0.1)
    assert np.allclose(w0 - owner.layers[0].weights, 0.01)
    assert np.allclose(w0 - scientist.layers[0].weights, 0.1)


# ---------------------------------------------------------------------------
# softmax cross entropy
# ---------------------------------------------------------------------------


def test_uniform_softmax_loss():
    logits = np.zeros((4, 10))
    loss, grad = softmax_cross_entropy(logits, [0, 3, 5, 9])
    assert loss == pytest.approx(np.log(10.0), rel=1e-12)
    assert grad.shape == (4, 10)


def test_confident_correct_logits_zero_loss():
    logits = np.full((1, 10), -1e4)
    logits[0, 2] = 1e4
    loss, _ = softmax_cross_entropy(logits, [2])
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 10)) * 50
    labels = rng.integers(0, 10, size=6)
    _, grad = softmax_cross_entropy(logits, labels)
    onehot = np.zeros((6, 10))
    onehot[np.arange(6), labels] = 1.0
    softmax = grad * 6 + onehot  # invert the (softmax - onehot)/B convention
    assert np.allclose(softmax.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(softmax >= 0.0)


def test_softmax_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(4, 10))
    labels = rng.integers(0, 10, size=4)
    _, grad = softmax_cross_entropy(logits, labels)
    eps = 1e-6
    for i in range(4):
        for j in range(10):
            up = logits.copy()
            up[i, j] += eps
            down = logits.copy()
            down[i, j] -= eps
            numeric = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(down, labels)[0]) / (2 * eps)
            assert grad[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), [-1])


def test_loss_nonnegative_property():
    rng = np.random.default_rng(21)
    for _ in range(20):
        logits = rng.normal(size=(5, 7)) * rng.uniform(0.1, 100)
        loss, _ = softmax_cross_entropy(logits, rng.integers(0, 7, size=5))
        assert loss >= 0.0


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def test_gradcheck_toy_chain():
    seg = init_segment(spec([6, 5, 4, 3]), seed=2)
    rng = np.random.default_rng(2)
    err = finite_diff_gradcheck(seg, rng.random((4, 6)), rng.integers(0, 3, size=4))
    assert err < 1e-6


def test_gradcheck_zero_input_finite():
    seg = init_segment(spec([4, 3], [RELU]), seed=0)
    err = finite_diff_gradcheck(seg, np.zeros((2, 4)), [0, 0])
    assert np.isfinite(err)


def test_gradcheck_epsilon_ordering():
    seg = init_segment(spec([5, 4, 3]), seed=6)
    rng = np.random.default_rng(6)
    x = rng.random((3, 5))
    y = rng.integers(0, 3, size=3)
    coarse = finite_diff_gradcheck(seg, x, y, epsilon=1e-3)
    fine = finite_diff_gradcheck(seg, x, y, epsilon=1e-5)
    assert fine <= coarse * 10  # same order or better


def test_gradcheck_restores_state():
    seg = init_segment(spec([4, 3], [IDENT]), seed=1)
    before = seg.copy_parameters()
    finite_diff_gradcheck(seg, np.random.default_rng(0).random((2, 4)), [0, 1])
    for (w0, b0), layer in zip(before, seg.layers):
        assert np.array_equal(w0, layer.weights)
        assert np.array_equal(b0, layer.bias)
        assert np.all(layer.grad_weights == 0.0)


# ---------------------------------------------------------------------------
# determinism and serialization
# ---------------------------------------------------------------------------


def test_training_determinism_bitwise():
    def run():
        seg = init_segment(spec([7, 5, 3]), seed=77)
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.random((4, 7))
            y = rng.integers(0, 3, size=4)
            _, g = softmax_cross_entropy(seg.forward(x), y)
            seg.backward(g)
            seg.sgd_step(0.05)
        return seg.copy_parameters()

    for (w1, b1), (w2, b2) in zip(run(), run()):
        assert np.array_equal(w1, w2) and np.array_equal(b1, b2)


def test_matrix_roundtrip():
    m = np.random.default_rng(0).normal(size=(3, 5))
    out = matrix_from_bytes(matrix_to_bytes(m))
    assert np.array_equal(m, out)


def test_matrix_bad_blob():
    with pytest.raises(ShapeError):
        matrix_from_bytes(b"\x00" * 7)
    blob = matrix_to_bytes(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        matrix_from_bytes(blob[:-1])


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(0, 6), cols=st.integers(0, 6), seed=st.integers(0, 1000))
def test_matrix_roundtrip_property(rows, cols, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols))
    assert np.array_equal(matrix_from_bytes(matrix_to_bytes(m)), m)
