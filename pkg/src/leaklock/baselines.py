"""Comparison leakage assessments: first-order statistics and attributions of a trained classifier."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from leaklock.datagen.aes import HW_TABLE
from leaklock.datagen.dataset import TraceDataset
from leaklock.errors import ConfigError, FormatError, ShapeError
from leaklock.ndmath import MlpClassifier, forward_with_cache, mlp_forward, vjp

log = logging.getLogger(__name__)

ATTRIBUTION_METHODS = ("gradvis", "saliency", "occlusion1", "input_x_grad", "lrp_eps")
LRP_EPS = 1e-6


@dataclass
class LeakageAssessment:
    scores: np.ndarray
    method: str
    source: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ShapeError("scores must be a vector")
        if not np.all(np.isfinite(self.scores)):
            raise ShapeError("scores must be finite")

    @property
    def t(self) -> int:
        return self.scores.size

    @property
    def seed(self):
        return self.source.get("seed", "")

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "score", "method", "seed"])
            for i, s in enumerate(self.scores):
                w.writerow([i, repr(float(s)), self.method, self.seed])

    @classmethod
    def load(cls, path: str | Path) -> LeakageAssessment:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"t", "score", "method", "seed"}:
            raise FormatError(f"{path}: expected columns t,score,method,seed")
        rows.sort(key=lambda r: int(r["t"]))
        if [int(r["t"]) for r in rows] != list(range(len(rows))):
            raise FormatError(f"{path}: timesteps must be 0..T-1")
        seed = rows[0]["seed"]
        src = {"seed": int(seed)} if seed.lstrip("-").isdigit() else {}
        return cls(np.array([float(r["score"]) for r in rows]), rows[0]["method"], src)


def model_digest(model: MlpClassifier) -> str:
    h = hashlib.sha256()
    for p in model.params():
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# -- first-order statistics --------------------------------------------------


def _class_moments(traces: np.ndarray, labels: np.ndarray):
    classes, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, traces.shape[1]))
    np.add.at(sums, inv, traces)
    means = sums / counts[:, None]
    sq = np.zeros_like(sums)
    np.add.at(sq, inv, (traces - means[inv]) ** 2)
    return classes, counts, means, sq


def snr(dataset: TraceDataset) -> LeakageAssessment:
    """Variance of the class-conditional means over the mean class-conditional variance.

    Both are weighted by the empirical class frequencies; variances use ``ddof=0``.
    """
    _, counts, means, sq = _class_moments(dataset.traces, dataset.labels)
    if np.any(counts < 2):
        log.warning("some classes have fewer than 2 samples; their variance is 0")
    w = counts / counts.sum()
    grand = w @ means
    signal = w @ (means - grand) ** 2
    noise = w @ (sq / counts[:, None])
    zero = ~(noise > 0)
    if zero.any():
        log.warning("zero within-class variance at %d timesteps; SNR set to 0 there", int(zero.sum()))
    scores = np.where(zero, 0.0, signal / np.where(zero, 1.0, noise))
    return LeakageAssessment(scores, "snr", {"dataset": dataset.digest()})


def sosd(dataset: TraceDataset) -> LeakageAssessment:
    """Sum over class pairs of squared differences of class means."""
    _, counts, means, _ = _class_moments(dataset.traces, dataset.labels)
    k = means.shape[0]
    # sum_{i<j} (m_i - m_j)^2 = k * sum m^2 - (sum m)^2
    scores = k * (means**2).sum(axis=0) - means.sum(axis=0) ** 2
    return LeakageAssessment(np.maximum(scores, 0.0), "sosd", {"dataset": dataset.digest()})


def leakage_model(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Hamming weight of the label (equal to the label itself for binary problems)."""
    if n_classes > 256:
        raise ConfigError("the Hamming-weight model needs byte or binary labels")
    return HW_TABLE[np.asarray(labels)].astype(np.float64)


def cpa(dataset: TraceDataset) -> LeakageAssessment:
    """Absolute Pearson correlation between the label's Hamming weight and each timestep."""
    h = leakage_model(dataset.labels, dataset.n_classes)
    x = dataset.traces
    hc = h - h.mean()
    xc = x - x.mean(axis=0)
    denom = np.sqrt((hc**2).sum() * (xc**2).sum(axis=0))
    zero = ~(denom > 0)
    if zero.any():
        log.warning("zero variance in %d CPA terms; correlation set to 0", int(zero.sum()))
    scores = np.abs(hc @ xc) / np.where(zero, 1.0, denom)
    scores[zero] = 0.0
    return LeakageAssessment(scores, "cpa", {"dataset": dataset.digest()})


# -- attributions ------------------------------------------------------------


def _logp_grad(model: MlpClassifier, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``log p(y|x)`` per row and its gradient wrt ``x``."""
    logp, cache = forward_with_cache(model, x)
    rows = np.arange(y.size)
    cot = np.zeros_like(logp)
    cot[rows, y] = 1.0
    _, gx = vjp(model, cache, logp, cot, want_params=False)
    return logp[rows, y], gx


def _lrp_eps(model: MlpClassifier, x: np.ndarray, y: np.ndarray, eps: float = LRP_EPS) -> np.ndarray:
    """Input relevances from the correct-class logit, epsilon rule with the bias in the denominator."""
    _, cache = forward_with_cache(model, x)
    rows = np.arange(y.size)
    rel = np.zeros_like(cache[-1])
    rel[rows, y] = cache[-1][rows, y]
    for i in range(model.n_layers - 1, -1, -1):
        a = cache[i]
        z = a @ model.weights[i] + model.biases[i]
        z += eps * np.where(z >= 0, 1.0, -1.0)
        rel = a * ((rel / z) @ model.weights[i].T)
    return rel


def _attribution_rows(method: str, model: MlpClassifier, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if method == "lrp_eps":
        return np.abs(_lrp_eps(model, x, y))
    if method == "occlusion1":
        rows = np.arange(y.size)
        base = np.exp(mlp_forward(model, x)[rows, y])
        out = np.empty_like(x)
        for t in range(x.shape[1]):
            xo = x.copy()
            xo[:, t] = 0.0
            out[:, t] = np.abs(base - np.exp(mlp_forward(model, xo)[rows, y]))
        return out
    logp_y, g = _logp_grad(model, x, y)
    if method == "gradvis":
        return np.abs(g)
    p_grad = np.exp(logp_y)[:, None] * g  # d p(y|x) / dx
    if method == "saliency":
        return np.abs(p_grad)
    return np.abs(x * p_grad)


def attribute(
    method: str,
    model: MlpClassifier,
    dataset: TraceDataset,
    chunk: int = 4096,
    seed: int | None = None,
) -> LeakageAssessment:
    """Mean absolute per-timestep attribution of ``model`` over ``dataset``."""
    method = {"inputxgrad": "input_x_grad", "lrp": "lrp_eps"}.get(method, method)
    if method not in ATTRIBUTION_METHODS:
        raise ConfigError(f"unknown attribution method {method!r}")
    if model.input_dim != dataset.t:
        raise ShapeError(f"model expects {model.input_dim} features, dataset has {dataset.t}")
    total = np.zeros(dataset.t)
    x_all = dataset.traces.astype(model.dtype)
    for lo in range(0, dataset.n, chunk):
        x = x_all[lo:lo + chunk]
        y = dataset.labels[lo:lo + chunk]
        total += _attribution_rows(method, model, x, y).sum(axis=0, dtype=np.float64)
    src = {"dataset": dataset.digest(), "model": model_digest(model)}
    if seed is not None:
        src["seed"] = seed
    return LeakageAssessment(total / max(dataset.n, 1), method, src)


def first_order(method: str, dataset: TraceDataset) -> LeakageAssessment:
    funcs = {"snr": snr, "sosd": sosd, "cpa": cpa}
    if method not in funcs:
        raise ConfigError(f"unknown statistic {method!r}")
    return funcs[method](dataset)
