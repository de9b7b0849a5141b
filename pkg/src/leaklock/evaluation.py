"""Evaluation of leakage assessments and classical attacks.

Covers Gaussian templates and their mutual-information readout, the
sliding-window omniscient GMM profile, Spearman comparison, DNN occlusion
curves, key-rank accumulation and the template attack.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from leaklock.datagen.aes import SBOX
from leaklock.datagen.dataset import TraceDataset, split
from leaklock.errors import ConfigError, DomainError, ShapeError
from leaklock.ndmath import MlpClassifier, mlp_forward

log = logging.getLogger(__name__)

SHRINKAGE = 1e-3
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmTemplate:
    """Class-conditional Gaussians over a window of ``d`` features (uniform class prior)."""

    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    counts: np.ndarray  # (K,)
    shrinkage: float = SHRINKAGE

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """``log N(x_n; mu_k, Sigma_k)`` for every row ``n`` and class ``k``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"template covers {self.dim} features, got {x.shape[1]}")
        chol = np.linalg.cholesky(self.covs)
        prec = np.linalg.inv(self.covs)
        prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        d = self.dim
        # -2 log N = x^T P x - 2 x^T P mu + mu^T P mu + logdet + d log 2pi, as one matmul over classes
        feats = np.concatenate(
            [(x[:, :, None] * x[:, None, :]).reshape(x.shape[0], d * d), x, np.ones((x.shape[0], 1))], axis=1
        )
        p_mu = np.einsum("kij,kj->ki", prec, self.means)
        const = (self.means * p_mu).sum(axis=1) + logdet + d * LOG_2PI
        coef = np.concatenate([prec.reshape(-1, d * d), -2.0 * p_mu, const[:, None]], axis=1)
        out = feats @ coef.T
        out *= -0.5
        return out

    def log_posterior(self, x: np.ndarray) -> np.ndarray:
        ll = self.log_likelihood(x)
        ll -= ll.max(axis=1, keepdims=True)
        ll -= np.log(np.exp(ll).sum(axis=1, keepdims=True))
        return ll


def _class_stats(x: np.ndarray, labels: np.ndarray, n_classes: int):
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if counts.size > n_classes:
        raise DomainError("label outside the class range")
    d = x.shape[1]

    def class_sums(cols: np.ndarray) -> np.ndarray:
        return np.stack([np.bincount(labels, weights=c, minlength=n_classes) for c in cols.T], axis=1)

    means = class_sums(x) / np.maximum(counts, 1)[:, None]
    diff = x - means[labels]
    iu = np.triu_indices(d)
    upper = class_sums(diff[:, iu[0]] * diff[:, iu[1]])
    scatter = np.zeros((n_classes, d, d))
    scatter[:, iu[0], iu[1]] = upper
    scatter[:, iu[1], iu[0]] = upper
    covs = scatter / np.maximum(counts - 1, 1)[:, None, None]
    return counts, means, covs


def _ridge(covs: np.ndarray, rho: float) -> np.ndarray:
    d = covs.shape[-1]
    scale = np.trace(covs, axis1=1, axis2=2) / d
    scale = np.where(scale > 0, scale, 1.0)
    return covs + rho * scale[:, None, None] * np.eye(d)


def _warn_small_classes(counts: np.ndarray, dim: int) -> None:
    few = np.flatnonzero(counts < dim + 1)
    if few.size:
        log.warning("%d classes have fewer than window_dim + 1 samples, e.g. %s", few.size, few.tolist()[:10])


def fit_gmm(
    x: np.ndarray,
    labels: np.ndarray,
    n_classes: int | None = None,
    shrinkage: float = SHRINKAGE,
    warn: bool = True,
) -> GmmTemplate:
    """Per-class mean and unbiased covariance plus a trace-scaled ridge ``rho * tr(S)/d * I``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    counts, means, covs = _class_stats(x, labels, k)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DomainError(f"no samples for classes {missing.tolist()}")
    if warn:
        _warn_small_classes(counts, x.shape[1])
    return GmmTemplate(means, _ridge(covs, shrinkage), counts, shrinkage)


def gmm_mutual_information(template: GmmTemplate, x: np.ndarray, labels: np.ndarray) -> float:
    """``log K + mean log p(y|x)`` on held-out data, clipped below at 0 (nats)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    lp = template.log_posterior(x)[np.arange(labels.size), labels]
    return max(0.0, float(np.log(template.n_classes) + lp.mean()))


def ogmm_assessment(
    dataset: TraceDataset,
    window: int = 5,
    fit_fraction: float = 0.5,
    seed: int = 0,
    shrinkage: float = SHRINKAGE,
) -> np.ndarray:
    """Sliding-window GMM mutual information with each share, averaged over shares.

    Returns a profile of length ``T - window + 1``; entry ``i`` covers
    timesteps ``i .. i + window - 1``.
    """
    shares = dataset.share_columns()
    if not shares:
        raise ConfigError("dataset has no share columns")
    if not 1 <= window <= dataset.t:
        raise ConfigError(f"window must be in [1, {dataset.t}]")
    fit, held = split(dataset, (fit_fraction, 1.0 - fit_fraction), seed)
    n_win = dataset.t - window + 1
    profile = np.zeros(n_win)
    for name in sorted(shares):
        col = "share:" + name
        k = max(int(dataset.aux[col].max()) + 1, 2)
        _warn_small_classes(np.bincount(fit.aux[col], minlength=k), window)
        for i in range(n_win):
            sl = slice(i, i + window)
            tpl = fit_gmm(fit.traces[:, sl], fit.aux[col], k, shrinkage, warn=False)
            profile[i] += gmm_mutual_information(tpl, held.traces[:, sl], held.aux[col])
    return profile / len(shares)


def spearman(a, b) -> float:
    """Pearson correlation of average-tie ranks; 0 (with a warning) if either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ShapeError("spearman needs two equal-length vectors of length >= 2")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        warnings.warn("spearman of a constant vector is undefined; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def window_average(scores: np.ndarray, window: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.convolve(scores, np.full(window, 1.0 / window), mode="valid")


def compare_to_ogmm(assessment: np.ndarray, profile: np.ndarray, window: int = 5) -> float:
    """Spearman between the window-averaged assessment and an oGMM profile."""
    avg = window_average(assessment, window)
    if avg.shape != np.shape(profile):
        raise ShapeError(f"assessment gives {avg.size} windows, profile has {np.size(profile)}")
    return spearman(avg, profile)


# -- occlusion tests ---------------------------------------------------------


@dataclass
class OcclusionCurve:
    counts: np.ndarray  # number of unmasked features, 0..T
    ranks: np.ndarray  # mean test rank at each count
    direction: str

    @property
    def auc(self) -> float:
        return float(self.ranks.mean())


def unmask_order(scores: np.ndarray, direction: str) -> np.ndarray:
    """Timesteps in the order they get unmasked; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if direction == "forward":
        return np.lexsort((idx, -scores))
    if direction == "reverse":
        return np.lexsort((idx, scores))
    raise ConfigError(f"direction must be 'forward' or 'reverse', got {direction!r}")


def mean_rank(model: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    logp = mlp_forward(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    true = logp[np.arange(labels.size), labels]
    return float((logp >= true[:, None]).sum(axis=1).mean())


def occlusion_test(
    model: MlpClassifier, x: np.ndarray, labels: np.ndarray, scores: np.ndarray, direction: str
) -> OcclusionCurve:
    """Mean test rank as features are unmasked one at a time, starting from all occluded (zeroed)."""
    x = np.asarray(x, dtype=np.float64)
    scores = np.asarray(scores)
    if scores.shape != (x.shape[1],):
        raise ShapeError(f"assessment length {scores.size} != T = {x.shape[1]}")
    order = unmask_order(scores, direction)
    cur = np.zeros_like(x)
    ranks = [mean_rank(model, cur, labels)]
    for t in order:
        cur[:, t] = x[:, t]
        ranks.append(mean_rank(model, cur, labels))
    return OcclusionCurve(np.arange(x.shape[1] + 1), np.array(ranks), direction)


# -- attacks -----------------------------------------------------------------


def key_rank_accumulation(
    model: MlpClassifier | None,
    x: np.ndarray | None,
    plaintexts: np.ndarray | None,
    true_key: int,
    log_probs: np.ndarray | None = None,
) -> np.ndarray:
    """Rank of ``true_key`` after accumulating ``log p(Sbox(k ^ w_n) | x_n)`` over the first n traces.

    Rank counts hypotheses scoring at least as high as the true key (ties count).
    ``log_probs`` may be passed instead of ``model``/``x``.
    """
    if plaintexts is None:
        raise ConfigError("key-rank accumulation needs plaintexts")
    w = np.asarray(plaintexts, dtype=np.int64)
    if log_probs is None:
        log_probs = mlp_forward(model, x)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.shape != (w.size, 256):
        raise ShapeError("key-rank accumulation needs 256-class predictions, one row per plaintext")
    keys = np.arange(256)
    hyp = SBOX[keys[None, :] ^ w[:, None]]  # (N, 256) intermediate under each key guess
    per_trace = np.take_along_axis(log_probs, hyp.astype(np.int64), axis=1)
    totals = np.cumsum(per_trace, axis=0)
    return (totals >= totals[:, [true_key]]).sum(axis=1)


def template_attack(
    profile_x: np.ndarray,
    profile_y: np.ndarray,
    attack_x: np.ndarray,
    attack_plaintexts: np.ndarray,
    poi,
) -> tuple[int, np.ndarray]:
    """Gaussian template attack on a key byte. Returns ``(best key, per-key scores)``.

    Templates use the unbiased class covariance; a trace-scaled ridge is added
    only when some class covariance is singular.
    """
    poi = np.atleast_1d(np.asarray(poi, dtype=np.int64))
    profile_x = np.asarray(profile_x, dtype=np.float64)
    attack_x = np.asarray(attack_x, dtype=np.float64)
    if attack_x.shape[0] == 0:
        raise DomainError("attack set is empty")
    if poi.size == 0 or poi.min() < 0 or poi.max() >= profile_x.shape[1]:
        raise DomainError("points of interest out of range")
    counts, means, covs = _class_stats(profile_x[:, poi], profile_y, 256)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DomainError(f"no profiling traces for classes {missing.tolist()}")
    eig_min = np.linalg.eigvalsh(covs)[:, 0]
    if np.any(eig_min <= 1e-12 * np.maximum(np.trace(covs, axis1=1, axis2=2), 1e-300)):
        warnings.warn("singular template covariance; applying shrinkage", RuntimeWarning, stacklevel=2)
        covs = _ridge(covs, SHRINKAGE)
    tpl = GmmTemplate(means, covs, counts, 0.0)
    ll = tpl.log_likelihood(attack_x[:, poi]) + np.log(counts)[None, :]
    w = np.asarray(attack_plaintexts, dtype=np.int64)
    hyp = SBOX[np.arange(256)[None, :] ^ w[:, None]].astype(np.int64)
    scores = np.take_along_axis(ll, hyp, axis=1).sum(axis=0)
    return int(np.argmax(scores)), scores
