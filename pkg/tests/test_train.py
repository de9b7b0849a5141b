import math

import numpy as np
import pytest

from leaklock.datagen import (
    SyntheticAesConfig,
    ToyConfig,
    gen_synthetic_aes,
    gen_toy_redundant,
    split,
    standardize_apply,
    standardize_fit,
)
from leaklock.datagen.toy import ToyStream
from leaklock.erasure import cost
from leaklock.errors import ConfigError, TrainingError
from leaklock.evaluation import fit_gmm, gmm_mutual_information
from leaklock.ndmath import MlpClassifier, new_mlp
from leaklock.train import (
    AllConfig,
    RunRecord,
    SupervisedConfig,
    pointwise_mi,
    select_best_trial,
    train_all,
    train_supervised,
    validation_accuracy,
    validation_rank,
)


def _redundant(sigma2, n=20_000, seed=0, n_leaky=1):
    return gen_toy_redundant(ToyConfig(variant="redundant", sigma2=sigma2, n_leaky=n_leaky, n=n, seed=seed))


# -- supervised -----------------------------------------------------------------------


def test_supervised_reaches_bayes_level_accuracy():
    train, val = split(_redundant(0.25), (0.8, 0.2), seed=0)
    model, rec = train_supervised(train, SupervisedConfig(), val=val)
    assert validation_accuracy(model, val.traces, val.labels) >= 0.95
    assert rec.status == "ok" and rec.checkpoints["best"] is model


def test_supervised_on_shuffled_labels_learns_nothing():
    ds = _redundant(0.25)
    ds.labels = np.random.default_rng(1).permutation(ds.labels)
    _, rec = train_supervised(ds, SupervisedConfig(steps=500))
    assert rec.val_losses[-1] >= 0.99 * math.log(2)


def test_supervised_is_deterministic():
    ds = _redundant(0.5, n=2000)
    cfg = SupervisedConfig(steps=50, hidden=(16,), eval_every=10)
    _, a = train_supervised(ds, cfg)
    _, b = train_supervised(ds, cfg)
    assert a.losses == b.losses and a.val_ranks == b.val_ranks


def test_supervised_keeps_minimal_rank_checkpoint():
    ds = _redundant(0.5, n=2000)
    model, rec = train_supervised(ds, SupervisedConfig(steps=60, hidden=(8,), eval_every=10, lr=3e-2))
    _, val = split(ds, (0.9, 0.1), 0)
    assert validation_rank(model, val.traces, val.labels) == pytest.approx(rec.min_val_rank)


def test_supervised_marks_divergence_as_failed():
    ds = _redundant(0.5, n=500)
    ds.traces[:] = np.nan
    _, rec = train_supervised(ds, SupervisedConfig(steps=100, hidden=(4,)))
    assert rec.status == "failed" and len(rec.steps) < 100


def test_supervised_config_errors():
    with pytest.raises(ConfigError):
        SupervisedConfig(steps=0).validate()
    with pytest.raises(Exception):
        SupervisedConfig(schedule="step").validate()


# -- rank and trial selection ------------------------------------------------------------


def test_validation_rank_examples():
    x = np.eye(3)
    perfect = MlpClassifier.zeros([3, 3])
    perfect.weights[0][:] = 10 * np.eye(3)
    assert validation_rank(perfect, x, [0, 1, 2]) == 1.0
    assert validation_rank(MlpClassifier.zeros([3, 3]), x, [0, 1, 2]) == 3.0
    wrong = MlpClassifier.zeros([1, 2])
    wrong.biases[0][:] = [math.log(0.6), math.log(0.4)]
    assert validation_rank(wrong, np.zeros((5, 1)), [1] * 5) == 2.0


def test_select_best_trial_examples():
    assert select_best_trial([(3.0, 0.5)]) == 0
    assert select_best_trial([(10, 2.0), (10.05, 1.0)]) == 1
    assert select_best_trial([(10, 2.0), (10.2, 1.0)]) == 0
    assert select_best_trial([(5, 1.0), (5, 1.0)]) == 0
    with pytest.raises(ConfigError):
        select_best_trial([])


# -- adversarial leakage localization ----------------------------------------------------


def _small_all(**kw):
    base = dict(steps=300, batch_size=128, hidden=(16,), log_every=100, eval_every=100, val_size=256)
    base.update(kw)
    return AllConfig(**base)


def test_all_step_counts_and_logging():
    res = train_all(ToyStream(ToyConfig(variant="redundant", n_leaky=2)), _small_all(ratio=3))
    assert (res.theta_steps, res.eta_steps) == (300, 900)
    rec = res.record
    assert rec.gamma_steps == [100, 200, 300] and rec.steps == list(range(1, 301))
    for g in rec.gammas:
        assert abs(cost(g).sum() - res.params.budget) <= 1e-9
    np.testing.assert_array_equal(rec.assessment, res.params.gamma)


def test_all_is_deterministic():
    src = ToyStream(ToyConfig(variant="redundant", n_leaky=2))
    a = train_all(src, _small_all(steps=100, pretrain_steps=20, abort_on_failure=False))
    b = train_all(src, _small_all(steps=100, pretrain_steps=20, abort_on_failure=False))
    assert a.record.losses == b.record.losses
    assert np.array_equal(a.params.eta_tilde, b.params.eta_tilde)


def test_all_pushes_leaky_feature_up():
    res = train_all(
        ToyStream(ToyConfig(variant="redundant", sigma2=0.5, n_leaky=1)),
        _small_all(steps=1000, lr_eta=1e-2, lr_theta=1e-2, log_every=100),
    )
    g = res.params.gamma
    assert g[1] > g[0]
    traj = res.record.gamma_array()
    tail = max(1, len(traj) // 10)
    per_step = np.abs(np.diff(traj[-tail - 1:], axis=0)).mean() / 100
    assert per_step <= 1e-3


def test_all_stays_uniform_without_leakage():
    cfg = SyntheticAesConfig(n=20_000, t=20, n_lkg=0, seed=0)
    ds = gen_synthetic_aes(cfg)
    ds = standardize_apply(ds, standardize_fit(ds))
    res = train_all(ds, _small_all(steps=1000, batch_size=256, hidden=(64,), abort_on_failure=False))
    assert np.abs(res.params.gamma - 0.5).max() <= 0.1


def test_all_aborts_when_classifier_fails():
    ds = _redundant(0.5, n=4000)
    ds.labels = np.random.default_rng(0).permutation(ds.labels)
    with pytest.raises(TrainingError):
        train_all(ds, _small_all(steps=10, pretrain_steps=200))


def test_all_config_errors():
    with pytest.raises(ConfigError):
        AllConfig(ratio=0).validate()
    with pytest.raises(ConfigError):
        AllConfig(ratio=1.5).validate()
    with pytest.raises(ConfigError):
        AllConfig(gamma_bar=1.0).validate()


def test_run_record_roundtrip(tmp_path):
    res = train_all(ToyStream(ToyConfig()), _small_all(steps=200))
    res.record.save(tmp_path / "run")
    back = RunRecord.load(tmp_path / "run")
    assert back.steps == res.record.steps and back.losses == pytest.approx(res.record.losses)
    assert back.gamma_steps == res.record.gamma_steps
    np.testing.assert_array_equal(back.gamma_array(), res.record.gamma_array())
    np.testing.assert_array_equal(back.assessment, res.record.assessment)
    assert back.config["kind"] == "all" and back.config["hidden"] == [16]
    model = back.checkpoints["final"]
    for p, q in zip(model.params(), res.model.params()):
        np.testing.assert_array_equal(p, q.astype(np.float64))
    lines = (tmp_path / "run" / "gamma.csv").read_text().splitlines()
    assert lines[0] == "step,gamma_1,gamma_2,gamma_3,gamma_4" and len(lines) == 3


# -- pointwise mutual information ---------------------------------------------------------


def test_pointwise_mi_identity_and_antisymmetry():
    rng = np.random.default_rng(0)
    model = new_mlp([6, 8, 4], rng)
    x, y = rng.normal(size=(10, 3)), rng.integers(0, 4, 10)
    a, b = np.array([1.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(pointwise_mi(model, x, y, a, a), 0.0)
    np.testing.assert_allclose(pointwise_mi(model, x, y, a, b), -pointwise_mi(model, x, y, b, a))
    assert isinstance(pointwise_mi(model, x[0], y[0], a, b), float)


def test_pointwise_mi_averages_to_mutual_information():
    sigma2 = 0.5
    src = ToyStream(ToyConfig(variant="redundant", sigma2=sigma2, n_leaky=1))
    res = train_all(src, _small_all(steps=1500, batch_size=256, lr_eta=0.0, lr_theta=3e-3))
    rng = np.random.default_rng(5)
    x, y = src.sample(50_000, rng)
    noise = rng.standard_normal(x.shape)
    pmi = pointwise_mi(res.model.astype(np.float64), x, y, np.array([0.0, 1.0]), np.zeros(2), noise=noise)
    fx, fy = src.sample(50_000, rng)
    oracle = gmm_mutual_information(fit_gmm(fx[:, 1], fy), x[:, 1], y)
    assert abs(pmi.mean() - oracle) <= 0.15 * oracle
