import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedprof.errors import ContractError, NumericError, SpecificationError
from fedprof.nn_core import (Batch, CaptureSelector, Model, ModelSpec, evaluate, forward_capture,
                             init_model, loss_and_grads, model_from_arrays, predict, softmax,
                             train_step)


def test_init_is_deterministic():
    spec = ModelSpec((2, 3, 2))
    a, b = init_model(spec, 7), init_model(spec, 7)
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(wa, wb)


def test_init_biases_zero():
    m = init_model(ModelSpec((4, 8, 2)), 1)
    assert all(np.all(b == 0.0) for b in m.biases)


def test_init_variance_matches_fan_in():
    m = init_model(ModelSpec((100, 50, 10)), 3)
    v = m.weights[0].var()
    assert 0.8 / 100 <= v <= 1.2 / 100


def test_invalid_spec_rejected():
    with pytest.raises(SpecificationError):
        ModelSpec((4, 0, 2))
    with pytest.raises(SpecificationError):
        ModelSpec((4,))


def _identity_layer():
    spec = ModelSpec((2, 2), (), "linear_mse")
    return model_from_arrays(spec, [np.eye(2)], [np.zeros(2)])


def test_capture_identity_map():
    m = _identity_layer()
    _, cap = forward_capture(m, Batch([[1.0, 2.0]], [[0.0, 0.0]]), CaptureSelector(0))
    assert np.array_equal(cap, [[1.0, 2.0]])


def test_capture_sum_all():
    spec = ModelSpec((3, 3), (), "linear_mse")
    m = model_from_arrays(spec, [np.eye(3)], [np.zeros(3)])
    _, cap = forward_capture(m, Batch([[1.0, 2.0, 3.0]], [[0, 0, 0]]), CaptureSelector(0, fusion="sum_all"))
    assert cap.shape == (1, 1) and cap[0, 0] == 6.0


def test_capture_relu_post_activation():
    spec = ModelSpec((2, 2, 1), ("relu",), "linear_mse")
    m = model_from_arrays(spec, [np.eye(2), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
    batch = Batch([[-1.0, 2.0]], [[0.0]])
    _, pre = forward_capture(m, batch, CaptureSelector(0, "pre_activation"))
    _, post = forward_capture(m, batch, CaptureSelector(0, "post_activation"))
    assert np.array_equal(pre, [[-1.0, 2.0]])
    assert np.array_equal(post, [[0.0, 2.0]])


def test_capture_shape_mismatch():
    m = _identity_layer()
    with pytest.raises(ContractError):
        forward_capture(m, Batch([[1.0, 2.0, 3.0]], [[0.0, 0.0]]), CaptureSelector(0))
    with pytest.raises(ContractError):
        forward_capture(m, Batch([[1.0, 2.0]], [[0.0, 0.0]]), CaptureSelector(5))


def test_fusion_equals_external_sum(small_model, rng):
    batch = Batch(rng.normal(size=(30, 4)), rng.integers(0, 3, 30))
    _, raw = forward_capture(small_model, batch, CaptureSelector(0))
    _, fused = forward_capture(small_model, batch, CaptureSelector(0, fusion="sum_all"))
    assert np.array_equal(raw.sum(axis=1, keepdims=True), fused)
    _, grouped = forward_capture(small_model, batch, CaptureSelector(0, fusion="sum_all", groups=3))
    assert np.array_equal(raw.reshape(30, 3, 2).sum(axis=2), grouped)


def test_mse_hand_gradient():
    spec = ModelSpec((1, 1), (), "linear_mse")
    m = model_from_arrays(spec, [[[1.0]]], [[0.0]])
    new, loss = train_step(m, Batch([[1.0]], [[0.0]]), 0.1)
    assert loss == pytest.approx(1.0)
    assert new.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_zero_lr_keeps_parameters(small_model, rng):
    batch = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    new, _ = train_step(small_model, batch, 0.0)
    assert np.array_equal(new.flat(), small_model.flat())


def test_prox_at_anchor_is_plain_step(small_model, rng):
    batch = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    plain, _ = train_step(small_model, batch, 0.1)
    prox, _ = train_step(small_model, batch, 0.1, (0.5, small_model))
    assert np.array_equal(plain.flat(), prox.flat())


def test_prox_pulls_toward_anchor(small_model, rng):
    batch = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    anchor = Model.from_flat(small_model.spec, np.zeros(small_model.spec.n_params))
    plain, _ = train_step(small_model, batch, 0.1)
    prox, _ = train_step(small_model, batch, 0.1, (1.0, anchor))
    assert np.allclose(prox.flat(), plain.flat() - 0.1 * small_model.flat())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises_numeric_error():
    spec = ModelSpec((1, 1), (), "linear_mse")
    m = model_from_arrays(spec, [[[1e200]]], [[0.0]])
    with pytest.raises(NumericError) as exc:
        train_step(m, Batch([[1e200]], [[0.0]]), 0.1)
    assert "grad_norm" in exc.value.payload


def _numeric_grad(model, batch, eps=1e-5):
    flat = model.flat()
    g = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        lu = loss_and_grads(Model.from_flat(model.spec, up), batch)[0]
        ld = loss_and_grads(Model.from_flat(model.spec, dn), batch)[0]
        g[i] = (lu - ld) / (2 * eps)
    return g


def _analytic_flat(model, batch):
    _, gw, gb = loss_and_grads(model, batch)
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(gw, gb)])


@pytest.mark.parametrize("act", ["tanh", "sigmoid", "identity", "relu"])
@pytest.mark.parametrize("head", ["softmax_nll", "linear_mse"])
def test_gradient_check(act, head):
    rng = np.random.default_rng(hash((act, head)) % 2**32)
    spec = ModelSpec((3, 5, 4, 2), (act, act), head)
    model = init_model(spec, 11)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, 6) if head == "softmax_nll" else rng.normal(size=(6, 2))
    batch = Batch(x, y)
    num = _numeric_grad(model, batch)
    ana = _analytic_flat(model, batch)
    rel = np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12)
    assert rel < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec((5, 7, 4))
    out = predict(init_model(spec, seed), rng.normal(scale=10, size=(20, 5)))
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(np.abs(softmax(rng.normal(scale=50, size=(5, 9))).sum(axis=1) - 1) <= 1e-9)


def test_evaluate_perfect_accuracy():
    spec = ModelSpec((2, 2), (), "softmax_nll")
    m = model_from_arrays(spec, [np.eye(2)], [np.zeros(2)])
    assert evaluate(m, Batch([[5.0, 0.0], [0.0, 5.0]], [0, 1])) == 1.0


def test_evaluate_mse_zero():
    spec = ModelSpec((3, 1), (), "linear_mse")
    m = model_from_arrays(spec, [np.zeros((1, 3))], [np.zeros(1)])
    assert evaluate(m, Batch(np.ones((4, 3)), np.zeros((4, 1))), "mse") == 0.0


def test_evaluate_constant_predictor_balanced():
    spec = ModelSpec((2, 2), (), "softmax_nll")
    m = model_from_arrays(spec, [np.zeros((2, 2))], [np.zeros(2)])
    # all logits tie; class 0 wins
    assert evaluate(m, Batch(np.ones((10, 2)), [0, 1] * 5)) == 0.5


def test_evaluate_empty_dataset():
    class Empty:
        features = np.zeros((0, 2))
        targets = np.zeros(0)

        def __len__(self):
            return 0

    m = init_model(ModelSpec((2, 2)), 0)
    with pytest.raises(ContractError):
        evaluate(m, Empty())


def test_train_step_is_pure(small_model, rng):
    batch = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    before = small_model.flat().copy()
    a, _ = train_step(small_model, batch, 0.1)
    b, _ = train_step(small_model, batch, 0.1)
    assert np.array_equal(small_model.flat(), before)
    assert np.array_equal(a.flat(), b.flat())
