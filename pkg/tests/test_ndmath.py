import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from leaklock.errors import DomainError, FormatError, ShapeError
from leaklock.ndmath import (
    LrSchedule,
    MlpClassifier,
    OptimizerState,
    forward_with_cache,
    mlp_backward,
    mlp_forward,
    model_from_bytes,
    model_to_bytes,
    new_mlp,
    optimizer_step,
    xavier_init,
)
from reference_mlp import reference_log_probs


def _fd_check(f, x, analytic, idx, h=1e-5, tol=1e-4):
    flat = x.reshape(-1)
    an = analytic.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        fd = (up - down) / (2 * h)
        scale = max(abs(fd), abs(an[i]), 1e-6)
        assert abs(fd - an[i]) / scale <= tol, (i, fd, an[i])


def test_zero_model_is_uniform():
    m = MlpClassifier.zeros([5, 7, 3])
    out = mlp_forward(m, np.random.default_rng(0).normal(size=(4, 5)))
    np.testing.assert_allclose(out, -math.log(3), atol=1e-15)


def test_sigmoid_limit():
    m = MlpClassifier.zeros([1, 2])
    m.weights[0][0] = [1.0, -1.0]
    p = np.exp(mlp_forward(m, np.array([[50.0]])))
    assert p[0, 0] == 1.0 and 0 < p[0, 1] < 1e-40


def test_forward_matches_reference_interpreter():
    m = new_mlp([5, 8, 6, 3], np.random.default_rng(0))
    for b in m.biases:
        b[:] = np.random.default_rng(1).normal(size=b.shape)
    x = np.random.default_rng(2).normal(size=(4, 5))
    out = mlp_forward(m, x)
    ws = [w.tolist() for w in m.weights]
    bs = [b.tolist() for b in m.biases]
    for row, o in zip(x, out):
        np.testing.assert_allclose(o, reference_log_probs(ws, bs, row.tolist()), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 20.0))
def test_log_probs_normalize(seed, scale):
    rng = np.random.default_rng(seed)
    m = new_mlp([4, 6, 5], rng)
    out = mlp_forward(m, scale * rng.normal(size=(8, 4)))
    assert np.all(np.abs(logsumexp(out, axis=1)) <= 1e-9)


def test_shape_errors():
    m = new_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(m, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        MlpClassifier([3, 2], [np.zeros((3, 3))], [np.zeros(2)])


def test_label_out_of_range():
    m = new_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(DomainError):
        mlp_backward(m, np.zeros((1, 3)), [2])


def test_uniform_model_loss_is_log_k():
    m = MlpClassifier.zeros([3, 5, 7])
    loss, _, _ = mlp_backward(m, np.ones((4, 3)), [0, 1, 2, 6])
    assert loss == pytest.approx(math.log(7), abs=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_param_gradients_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = new_mlp([6, 10, 8, 4], rng)
    for b in m.biases:
        b[:] = 0.1 * rng.normal(size=b.shape)
    x = rng.normal(size=(12, 6))
    y = rng.integers(0, 4, size=12)
    _, grads, _ = mlp_backward(m, x, y)
    for p, g in zip(m.params(), grads):
        idx = rng.choice(p.size, size=min(p.size, 25), replace=False)
        _fd_check(lambda: mlp_backward(m, x, y)[0], p, g, idx)


@pytest.mark.parametrize("seed", [0, 1])
def test_input_gradients_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = new_mlp([5, 12, 3], rng)
    x = rng.normal(size=(7, 5))
    y = rng.integers(0, 3, size=7)
    _, _, gx = mlp_backward(m, x, y)
    _fd_check(lambda: mlp_backward(m, x, y)[0], x, gx, range(x.size))


def test_duplicate_rows_share_input_gradient():
    rng = np.random.default_rng(3)
    m = new_mlp([4, 6, 2], rng)
    x = np.repeat(rng.normal(size=(1, 4)), 3, axis=0)
    _, _, gx = mlp_backward(m, x, [1, 1, 1])
    assert np.array_equal(gx[0], gx[1]) and np.array_equal(gx[1], gx[2])


def test_optimizer_zero_grad_no_decay_is_noop():
    p = [np.arange(4.0)]
    st_ = OptimizerState.for_params(p, [True], weight_decay=0.0)
    optimizer_step(st_, p, [np.zeros(4)])
    np.testing.assert_array_equal(p[0], np.arange(4.0))


def test_optimizer_first_step_hand_computed():
    g = np.array([0.5, -2.0, 1e-3])
    p = [np.zeros(3)]
    lr, eps = 1e-2, 1e-8
    st_ = OptimizerState.for_params(p, [False], lr=lr, eps=eps, weight_decay=0.0)
    optimizer_step(st_, p, [g])
    # after bias correction m_hat = g and sqrt(v_hat) = |g|
    np.testing.assert_allclose(p[0], -lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_optimizer_decay_only_on_weights():
    w, b = np.full(3, 2.0), np.full(3, 2.0)
    st_ = OptimizerState.for_params([w, b], [True, False], lr=0.1, weight_decay=0.5)
    optimizer_step(st_, [w, b], [np.zeros(3), np.zeros(3)])
    np.testing.assert_allclose(w, 2.0 * (1 - 0.1 * 0.5))
    np.testing.assert_array_equal(b, 2.0)


def test_optimizer_skips_non_finite(caplog):
    p = [np.ones(2)]
    st_ = OptimizerState.for_params(p)
    assert not optimizer_step(st_, p, [np.array([np.nan, 1.0])])
    assert st_.skipped == 1 and st_.step == 0
    np.testing.assert_array_equal(p[0], 1.0)
    assert "non-finite" in caplog.text


def test_optimizer_shape_mismatch():
    p = [np.ones(2)]
    st_ = OptimizerState.for_params(p)
    with pytest.raises(ShapeError):
        optimizer_step(st_, p, [np.ones(3)])


def test_cosine_schedule():
    s = LrSchedule("cosine", 1.0, 100)
    assert s.rate(0) == 1.0
    assert s.rate(50) == pytest.approx(0.5)
    assert all(s.rate(k) > 0 for k in range(100))
    with pytest.raises(DomainError):
        LrSchedule("linear")


def test_xavier_bound_and_determinism():
    m1 = new_mlp([500, 256], np.random.default_rng(0))
    m2 = new_mlp([500, 256], np.random.default_rng(0))
    bound = math.sqrt(6 / 756)
    assert np.abs(m1.weights[0]).max() <= bound
    assert np.array_equal(m1.weights[0], m2.weights[0])
    assert not m1.biases[0].any()


def test_xavier_variance():
    m = xavier_init(MlpClassifier.zeros([500, 500]), np.random.default_rng(4))
    bound2 = 6 / 1000
    assert abs(m.weights[0].var() / (bound2 / 3) - 1) < 0.1


def test_training_determinism():
    def run():
        rng = np.random.default_rng(9)
        m = new_mlp([4, 8, 3], rng)
        st_ = OptimizerState.for_model(m)
        for _ in range(5):
            x = rng.normal(size=(16, 4))
            _, g, _ = mlp_backward(m, x, rng.integers(0, 3, 16))
            optimizer_step(st_, m.params(), g)
        return m

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_float32_model_tracks_float64():
    m = new_mlp([6, 16, 3], np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 6))
    np.testing.assert_allclose(mlp_forward(m.astype(np.float32), x), mlp_forward(m, x), atol=1e-5)


def test_checkpoint_roundtrip_and_crc():
    m = new_mlp([3, 5, 2], np.random.default_rng(0))
    data = model_to_bytes(m)
    assert data[:4] == b"LLMD"
    back = model_from_bytes(data)
    assert all(np.array_equal(p, q) for p, q in zip(m.params(), back.params()))
    corrupted = bytearray(data)
    corrupted[20] ^= 0xFF
    with pytest.raises(FormatError):
        model_from_bytes(bytes(corrupted))
    with pytest.raises(FormatError):
        model_from_bytes(b"XXXX" + data[4:])


def test_cache_layout():
    m = new_mlp([3, 4, 2], np.random.default_rng(0))
    logp, cache = forward_with_cache(m, np.ones((2, 3)))
    assert len(cache) == 3 and cache[1].min() >= 0 and cache[2].shape == (2, 2)
