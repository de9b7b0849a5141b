import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit
from scipy.stats import ks_2samp

from leaklock import erasure
from leaklock.erasure import (
    ErasureParams,
    RelaxationConfig,
    all_masks,
    conditional_resample,
    cost,
    exact_expectation,
    exact_gamma_gradient,
    exact_gradient,
    gamma_from_eta,
    masked_objective,
    mask_table,
    rebar_estimates,
    reinforce_estimates,
    sample_mask,
)
from leaklock.errors import CapacityError, ConfigError, DomainError, ShapeError, TrainingError
from leaklock.ndmath import MlpClassifier, mlp_backward, new_mlp

ZERO_FILL = RelaxationConfig(noise_fill="zero")


def _problem(seed, t=4, d=24, hidden=8, k=3, weight_scale=3.0):
    rng = np.random.default_rng(seed)
    model = new_mlp([2 * t, hidden, k], rng)
    for w in model.weights:
        w *= weight_scale
    x = rng.normal(size=(d, t))
    y = rng.integers(0, k, d)
    params = ErasureParams(rng.normal(size=t), gamma_bar=0.5)
    return model, x, y, params


# -- parametrization -------------------------------------------------------------------


def test_cost_examples():
    assert cost(0.0) == 0.0 and cost(0.5) == 1.0
    assert cost(0.9) == pytest.approx(9.0, rel=1e-12)
    g = np.linspace(0, 0.99, 50)
    assert np.all(np.diff(cost(g)) > 0)
    for bad in (1.0, 1.5, -0.1, float("nan")):
        with pytest.raises(DomainError):
            cost(bad)


def test_zero_eta_gives_gamma_bar():
    for gb in (0.1, 0.5, 0.93):
        np.testing.assert_allclose(gamma_from_eta(ErasureParams.uniform(7, gb)), gb, rtol=0, atol=1e-12)


def test_hand_computed_gamma():
    p = ErasureParams(np.array([math.log(3.0), 0.0]), gamma_bar=0.5)
    np.testing.assert_allclose(p.gamma, [0.6, 1 / 3], atol=1e-15)
    assert cost(p.gamma).sum() == pytest.approx(2.0, abs=1e-12)


def test_budget_holds_for_many_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = int(rng.integers(1, 60))
        p = ErasureParams(rng.normal(0, 3, t), gamma_bar=float(rng.uniform(0.05, 0.95)))
        assert abs(cost(p.gamma).sum() - p.budget) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(
    eta=st.lists(st.floats(-20, 20), min_size=1, max_size=12),
    shift=st.floats(-50, 50),
    gb=st.floats(0.05, 0.95),
)
def test_gamma_shift_invariant(eta, shift, gb):
    a = ErasureParams(np.array(eta), gb).gamma
    b = ErasureParams(np.array(eta) + shift, gb).gamma
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)
    assert np.all((a > 0) & (a < 1))


@settings(max_examples=40, deadline=None)
@given(eta=st.lists(st.floats(-5, 5), min_size=2, max_size=8), idx=st.integers(0, 7), step=st.floats(0.01, 3))
def test_gamma_monotone_in_own_coordinate(eta, idx, step):
    eta = np.array(eta)
    idx %= eta.size
    bumped = eta.copy()
    bumped[idx] += step
    assert ErasureParams(bumped).gamma[idx] > ErasureParams(eta).gamma[idx]


def test_params_validation():
    with pytest.raises(ConfigError):
        ErasureParams(np.zeros(3), gamma_bar=1.0)
    with pytest.raises(ShapeError):
        ErasureParams(np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        RelaxationConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        RelaxationConfig(noise_fill="uniform")


# -- sampling -------------------------------------------------------------------------


def test_keep_rate_half():
    n = 100_000
    s = sample_mask(np.array([0.5]), np.random.default_rng(0), n=n)
    assert abs(s.hard.mean() - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert np.array_equal(s.hard, (s.z >= 0).astype(float))


def test_keep_rates_match_random_gamma():
    n = 100_000
    gamma = np.random.default_rng(1).uniform(0.05, 0.95, size=10)
    s = sample_mask(gamma, np.random.default_rng(2), n=n)
    se = np.sqrt(gamma * (1 - gamma) / n)
    assert np.all(np.abs(s.hard.mean(axis=0) - (1 - gamma)) <= 3 * se)


def test_gamma_near_one_always_erases():
    s = sample_mask(np.array([1 - 1e-13]), np.random.default_rng(0), n=10_000)
    assert not s.hard.any()
    with pytest.raises(DomainError):
        sample_mask(np.array([1.0]), np.random.default_rng(0))


def test_conditional_resample_respects_hard_value():
    rng = np.random.default_rng(3)
    gamma = rng.uniform(0.01, 0.99, size=(2000, 5))
    b = (rng.random(gamma.shape) < 0.5).astype(float)
    zt = conditional_resample(gamma, b, rng)
    assert np.all(zt[b == 1] >= 0) and np.all(zt[b == 0] < 0)


@pytest.mark.parametrize("bit", [0.0, 1.0])
def test_conditional_resample_matches_rejection_sampling(bit):
    gamma, n = 0.3, 100_000
    rng = np.random.default_rng(4)
    phi = logit(1 - gamma)
    accepted = []
    while sum(a.size for a in accepted) < n:
        z = phi + logit(rng.random(200_000))
        accepted.append(z[(z >= 0) == bool(bit)])
    oracle = np.concatenate(accepted)[:n]
    zt = conditional_resample(np.full(n, gamma), np.full(n, bit), rng)
    assert ks_2samp(zt, oracle).statistic <= 0.01


def test_relaxation_approaches_hard_mask():
    s = sample_mask(np.full(6, 0.4), np.random.default_rng(5), n=1000)
    soft, _ = s.relaxed(1e-4)
    far = np.abs(s.z) > 1e-2
    np.testing.assert_allclose(soft[far], s.hard[far], atol=1e-12)


# -- masked objective ---------------------------------------------------------------------


def _fd(f, arr, idx, h=1e-5):
    flat = arr.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def _close(fd, an, tol=1e-4):
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)
    assert np.all(np.abs(fd - an) / scale <= tol), (fd, an)


@pytest.mark.parametrize("per_row", [False, True])
@pytest.mark.parametrize("fill", ["zero", "gaussian"])
def test_masked_objective_alpha_gradient(per_row, fill):
    model, x, y, _ = _problem(0, t=5, d=10)
    rng = np.random.default_rng(1)
    alpha = rng.uniform(0, 1, size=(10, 5) if per_row else 5)
    noise = rng.normal(size=x.shape) if fill == "gaussian" else None
    cfg = RelaxationConfig(noise_fill=fill)
    _, _, ga = masked_objective(model, x, y, alpha, cfg, noise=noise)
    assert ga.shape == alpha.shape
    fd = _fd(lambda: masked_objective(model, x, y, alpha, cfg, noise=noise)[0], alpha, range(alpha.size))
    _close(fd, ga.reshape(-1))


def test_masked_objective_param_gradient():
    model, x, y, _ = _problem(2, t=4, d=12)
    alpha = np.random.default_rng(3).uniform(size=4)
    _, grads, _ = masked_objective(model, x, y, alpha, ZERO_FILL)
    for p, g in zip(model.params(), grads):
        idx = range(min(p.size, 20))
        fd = _fd(lambda: masked_objective(model, x, y, alpha, ZERO_FILL)[0], p, idx)
        _close(fd, g.reshape(-1)[: len(fd)])


def test_full_mask_is_plain_supervised_objective():
    model, x, y, _ = _problem(4)
    value, _, _ = masked_objective(model, x, y, np.ones(4), ZERO_FILL)
    loss, _, _ = mlp_backward(model, np.concatenate([x, np.ones_like(x)], axis=1), y)
    assert value == pytest.approx(-loss, rel=1e-12)


def test_empty_mask_zero_fill_ignores_inputs():
    model, x, y, _ = _problem(5)
    a = masked_objective(model, x, y, np.zeros(4), ZERO_FILL)[0]
    b = masked_objective(model, 10 * x + 3, y, np.zeros(4), ZERO_FILL)[0]
    assert a == b


def test_masked_objective_shape_errors():
    model, x, y, _ = _problem(6)
    with pytest.raises(ShapeError):
        masked_objective(model, x, y, np.ones(3), ZERO_FILL)
    with pytest.raises(ShapeError):
        masked_objective(model, x[:, :3], y, np.ones(3), ZERO_FILL)


# -- estimators -----------------------------------------------------------------------------


def test_zero_control_scale_is_reinforce():
    model, x, y, params = _problem(7)
    for fill in ("zero", "gaussian"):
        a = rebar_estimates(model, x, y, params, RelaxationConfig(control_scale=0.0, noise_fill=fill),
                            np.random.default_rng(8))
        b = reinforce_estimates(model, x, y, params, RelaxationConfig(noise_fill=fill), np.random.default_rng(8))
        assert np.array_equal(a, b)


def _within_3se(est, exact):
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
    assert np.all(np.abs(mean - exact) <= 3 * se), (mean, exact, se)


def test_reinforce_unbiased_small_problem():
    model, x, y, params = _problem(9)
    _, exact = exact_gradient(model, (x, y), params)
    est = reinforce_estimates(model, x, y, params, ZERO_FILL, np.random.default_rng(10), n_masks=100_000)
    _within_3se(est, exact)


def test_rebar_unbiased_small_problem():
    model, x, y, params = _problem(11)
    _, exact = exact_gradient(model, (x, y), params)
    est = rebar_estimates(model, x, y, params, ZERO_FILL, np.random.default_rng(12), n_masks=50_000)
    _within_3se(est, exact)


def test_reinforce_constant_objective_has_zero_mean():
    t = 5
    model = MlpClassifier.zeros([2 * t, 4, 3])
    model.biases[-1][:] = [2.0, -1.0, 0.5]
    rng = np.random.default_rng(13)
    x, y = rng.normal(size=(6, t)), rng.integers(0, 3, 6)
    params = ErasureParams(rng.normal(size=t))
    est = reinforce_estimates(model, x, y, params, ZERO_FILL, rng, n_masks=100_000)
    _within_3se(est, np.zeros(t))


def test_per_row_layout_shapes():
    model, x, y, params = _problem(14, d=30)
    est = rebar_estimates(model, x, y, params, RelaxationConfig(), np.random.default_rng(0))
    assert est.shape == (30, 4) and np.all(np.isfinite(est))
    # the eta gradient of any estimate is orthogonal to the all-ones direction
    np.testing.assert_allclose(est.sum(axis=1), 0.0, atol=1e-10)


def test_non_finite_estimates_are_redrawn_then_rejected(monkeypatch, caplog):
    model, x, y, params = _problem(15, d=6)
    calls = []

    def flaky(model_, xs, ys, phi, cfg, rng, m):
        calls.append(m)
        out = np.ones((m, phi.size))
        if len(calls) == 1:
            out[2] = np.nan
        return out

    est = erasure._estimates(flaky, model, x, y, params, ZERO_FILL, np.random.default_rng(0), None)
    assert calls == [6, 1] and np.all(np.isfinite(est))
    assert "non-finite" in caplog.text

    def broken(model_, xs, ys, phi, cfg, rng, m):
        return np.full((m, phi.size), np.nan)

    with pytest.raises(TrainingError):
        erasure._estimates(broken, model, x, y, params, ZERO_FILL, np.random.default_rng(0), None)


# -- exact enumeration ------------------------------------------------------------------------


def test_single_timestep_expectation():
    a, b, gamma = -0.7, 1.9, np.array([0.35])
    value, grad = exact_expectation(np.array([a, b]), gamma)
    assert value == pytest.approx(0.35 * a + 0.65 * b, rel=1e-14)
    assert grad[0] == pytest.approx(a - b, rel=1e-12)


def test_uniform_table_has_zero_gradient():
    gamma = np.random.default_rng(0).uniform(0.1, 0.9, 6)
    value, grad = exact_expectation(np.full(64, 2.5), gamma)
    assert value == pytest.approx(2.5, rel=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_mask_enumeration_layout():
    m = all_masks(3)
    assert m.shape == (8, 3) and list(m[6]) == [0, 1, 1]
    with pytest.raises(CapacityError):
        all_masks(17)
    with pytest.raises(CapacityError):
        exact_gradient(None, (np.zeros((1, 17)), np.zeros(1, int)), ErasureParams.uniform(17))


@pytest.mark.parametrize("seed", [0, 1])
def test_exact_gradient_matches_finite_differences(seed):
    model, x, y, params = _problem(seed, t=5)
    _, grad = exact_gradient(model, (x, y), params)
    fd = _fd(lambda: exact_gradient(model, (x, y), params)[0], params.eta_tilde, range(5))
    np.testing.assert_allclose(fd, grad, rtol=0, atol=1e-6)


def test_exact_table_matches_direct_evaluation():
    model, x, y, _ = _problem(3, t=3)
    table = mask_table(model, x, y)
    for i, mask in enumerate(all_masks(3)):
        assert table[i] == pytest.approx(masked_objective(model, x, y, mask, ZERO_FILL)[0], rel=1e-12)


def test_optimal_classifier_pushes_leaky_timestep_towards_erasure():
    # Bayes-optimal zero-fill classifier for the one-leaky-feature toy: the log-odds are 2*x_1/sigma2
    sigma2 = 0.5
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 5000)
    x = np.stack([rng.normal(size=5000), (2.0 * y - 1) + math.sqrt(sigma2) * rng.normal(size=5000)], axis=1)
    model = MlpClassifier.zeros([4, 2])
    model.weights[0][1] = [-1.0 / sigma2, 1.0 / sigma2]
    _, grad_gamma = exact_gamma_gradient(model, (x, y), ErasureParams.uniform(2))
    assert grad_gamma[1] < -0.1
    assert grad_gamma[0] == 0.0
