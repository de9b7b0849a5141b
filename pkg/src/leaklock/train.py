"""Supervised classifier training and the alternating classifier-vs-erasure loop."""
from __future__ import annotations

import csv
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from leaklock.datagen.dataset import TraceDataset, split
from leaklock.erasure import (
    ErasureParams,
    RelaxationConfig,
    build_masked_input,
    masked_objective,
    rebar_gradient,
    sample_mask,
)
from leaklock.errors import ConfigError, ShapeError, TrainingError
from leaklock.ndmath import (
    LrSchedule,
    MlpClassifier,
    OptimizerState,
    load_model,
    mlp_backward,
    mlp_forward,
    new_mlp,
    optimizer_step,
    save_model,
)

log = logging.getLogger(__name__)

_MAX_BAD_STEPS = 20


class TraceSource(Protocol):
    t: int
    n_classes: int

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


class _DatasetSource:
    """Uniform minibatches (with replacement) from a finite dataset."""

    def __init__(self, ds: TraceDataset):
        self.ds = ds
        self.t = ds.t
        self.n_classes = ds.n_classes

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, self.ds.n, size=n)
        return self.ds.traces[idx], self.ds.labels[idx]


def _as_source(data) -> TraceSource:
    return _DatasetSource(data) if isinstance(data, TraceDataset) else data


# -- bookkeeping -------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_ranks: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    gamma_steps: list[int] = field(default_factory=list)
    gammas: list[np.ndarray] = field(default_factory=list)
    assessment: np.ndarray | None = None
    checkpoints: dict[str, MlpClassifier] = field(default_factory=dict)
    status: str = "ok"

    @property
    def min_val_rank(self) -> float:
        return min(self.val_ranks) if self.val_ranks else float("inf")

    @property
    def best_val_loss(self) -> float:
        """Validation loss at the checkpoint with minimal validation rank."""
        if not self.val_ranks:
            return float("inf")
        return self.val_losses[int(np.argmin(self.val_ranks))]

    def gamma_array(self) -> np.ndarray:
        return np.array(self.gammas) if self.gammas else np.zeros((0, 0))

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        meta = {"status": self.status, "config": _toml_safe(self.config)}
        (out / "config.toml").write_text(tomli_w.dumps(meta))
        val = dict(zip(self.val_steps, zip(self.val_ranks, self.val_losses)))
        all_steps = sorted(set(self.steps) | set(val))
        loss = dict(zip(self.steps, self.losses))
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "val_rank", "val_loss"])
            for s in all_steps:
                vr, vl = val.get(s, ("", ""))
                w.writerow([s, loss.get(s, ""), vr, vl])
        if self.gammas:
            with open(out / "gamma.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                t = len(self.gammas[0])
                w.writerow(["step"] + [f"gamma_{i + 1}" for i in range(t)])
                for s, g in zip(self.gamma_steps, self.gammas):
                    w.writerow([s] + [repr(float(v)) for v in g])
        if self.assessment is not None:
            with open(out / "assessment.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "score"])
                for i, v in enumerate(self.assessment):
                    w.writerow([i, repr(float(v))])
        for name, model in self.checkpoints.items():
            save_model(model, out / "checkpoints" / f"{name}.llmd")
        return out

    @classmethod
    def load(cls, directory: str | Path) -> RunRecord:
        d = Path(directory)
        meta = tomllib.loads((d / "config.toml").read_text())
        rec = cls(config=meta.get("config", {}), status=meta.get("status", "ok"))
        with open(d / "metrics.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                s = int(row["step"])
                if row["loss"] != "":
                    rec.steps.append(s)
                    rec.losses.append(float(row["loss"]))
                if row["val_rank"] != "":
                    rec.val_steps.append(s)
                    rec.val_ranks.append(float(row["val_rank"]))
                    rec.val_losses.append(float(row["val_loss"]))
        if (d / "gamma.csv").exists():
            with open(d / "gamma.csv", newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for row in reader:
                    rec.gamma_steps.append(int(row[0]))
                    rec.gammas.append(np.array([float(v) for v in row[1:]]))
        if (d / "assessment.csv").exists():
            data = np.loadtxt(d / "assessment.csv", delimiter=",", skiprows=1, ndmin=2)
            rec.assessment = data[:, 1]
        for p in sorted((d / "checkpoints").glob("*.llmd")):
            rec.checkpoints[p.stem] = load_model(p)
        return rec


def _toml_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _toml_safe(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_toml_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- validation helpers ------------------------------------------------------


def _ranks(logp: np.ndarray, labels: np.ndarray) -> np.ndarray:
    true = logp[np.arange(labels.size), labels]
    return (logp >= true[:, None]).sum(axis=1)


def validation_rank(model: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    """Mean number of labels scored at least as high as the true label (ties count)."""
    labels = np.asarray(labels, dtype=np.int64)
    return float(_ranks(mlp_forward(model, x), labels).mean())


def validation_loss(model: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    logp = mlp_forward(model, x)
    return float(-logp[np.arange(labels.size), labels].mean())


def validation_accuracy(model: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    return float((mlp_forward(model, x).argmax(axis=1) == np.asarray(labels)).mean())


def select_best_trial(trials: Sequence) -> int:
    """Index of the best trial among ``(min_val_rank, val_loss)`` pairs or run records.

    Trials whose minimum rank exceeds 1.01x the best are dropped; the lowest
    validation loss wins among the rest, ties going to the lower index.
    """
    if not trials:
        raise ConfigError("select_best_trial needs at least one trial")
    pairs = [
        (t.min_val_rank, t.best_val_loss) if isinstance(t, RunRecord) else (float(t[0]), float(t[1]))
        for t in trials
    ]
    best_rank = min(r for r, _ in pairs)
    keep = [i for i, (r, _) in enumerate(pairs) if r <= 1.01 * best_rank]
    return min(keep, key=lambda i: (pairs[i][1], i))


# -- supervised training -----------------------------------------------------


@dataclass
class SupervisedConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    weight_decay: float = 1e-2
    schedule: str = "constant"
    steps: int = 1000
    batch_size: int = 256
    hidden: tuple[int, ...] = (500,)
    eval_every: int = 100
    val_fraction: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("batch_size and eval_every must be positive")
        LrSchedule(self.schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def train_supervised(
    dataset: TraceDataset, cfg: SupervisedConfig, val: TraceDataset | None = None
) -> tuple[MlpClassifier, RunRecord]:
    """AdamW on the cross-entropy; returns the checkpoint with minimal validation rank.

    Without an explicit ``val`` set, ``cfg.val_fraction`` of ``dataset`` is held out.
    """
    cfg.validate()
    if val is None:
        train, val = split(dataset, (1.0 - cfg.val_fraction, cfg.val_fraction), cfg.seed)
    else:
        train = dataset
    if val.t != train.t:
        raise ShapeError("train and validation widths differ")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = new_mlp([train.t, *cfg.hidden, train.n_classes], np.random.default_rng(seeds[0]), cfg.dtype)
    data_rng = np.random.default_rng(seeds[1])
    opt = OptimizerState.for_model(
        model, lr=cfg.lr, beta1=cfg.beta1, weight_decay=cfg.weight_decay,
        schedule=LrSchedule(cfg.schedule, cfg.lr, cfg.steps),
    )
    rec = RunRecord(config={"kind": "supervised", **cfg.to_dict()})
    best, best_rank = model.copy(), np.inf
    bad = 0
    src = _DatasetSource(train)
    for step in range(1, cfg.steps + 1):
        x, y = src.sample(cfg.batch_size, data_rng)
        loss, grads, _ = mlp_backward(model, x, y)
        ok = np.isfinite(loss) and optimizer_step(opt, model.params(), grads)
        bad = 0 if ok else bad + 1
        if bad >= _MAX_BAD_STEPS:
            rec.status = "failed"
            log.error("supervised run diverged at step %d", step)
            break
        rec.steps.append(step)
        rec.losses.append(float(loss))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            vr = validation_rank(model, val.traces, val.labels)
            vl = validation_loss(model, val.traces, val.labels)
            rec.val_steps.append(step)
            rec.val_ranks.append(vr)
            rec.val_losses.append(vl)
            if vr < best_rank:
                best, best_rank = model.copy(), vr
    rec.checkpoints["best"] = best
    return best, rec


# -- adversarial leakage localization ----------------------------------------


@dataclass
class AllConfig:
    lr_theta: float = 1e-3
    lr_eta: float = 1e-3
    gamma_bar: float = 0.5
    weight_decay: float = 0.0
    ratio: int = 1
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 0.0
    steps: int = 10_000
    batch_size: int = 1000
    hidden: tuple[int, ...] = (500,)
    relaxation: RelaxationConfig = field(default_factory=RelaxationConfig)
    log_every: int = 100
    eval_every: int = 1000
    val_size: int = 2000
    abort_on_failure: bool = True
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.ratio, (int, np.integer)) or self.ratio < 1:
            raise ConfigError("ratio must be an integer >= 1")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if not 0.0 < self.gamma_bar < 1.0:
            raise ConfigError("gamma_bar must lie in (0, 1)")
        if self.batch_size <= 0 or self.log_every <= 0 or self.eval_every <= 0:
            raise ConfigError("batch_size, log_every and eval_every must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AllResult:
    model: MlpClassifier
    params: ErasureParams
    record: RunRecord
    theta_steps: int
    eta_steps: int

    @property
    def assessment(self) -> np.ndarray:
        return self.params.gamma


def masked_validation_rank(
    model: MlpClassifier, x: np.ndarray, y: np.ndarray, gamma: np.ndarray, rng: np.random.Generator
) -> tuple[float, float]:
    """Rank and loss of the masked-input classifier under fresh masks drawn from ``gamma``."""
    b = sample_mask(gamma, rng, n=x.shape[0]).hard
    inp = build_masked_input(x, b, rng.standard_normal(x.shape))
    return validation_rank(model, inp, y), validation_loss(model, inp, y)


def _theta_step(model, opt, src, params, cfg, rng) -> float:
    x, y = src.sample(cfg.batch_size, rng)
    b = sample_mask(params.gamma, rng, n=x.shape[0]).hard
    value, grads, _ = masked_objective(model, x, y, b, cfg.relaxation, rng=rng)
    # the classifier maximizes the log-likelihood
    optimizer_step(opt, model.params(), [-g for g in grads])
    return -value


def train_all(data, cfg: AllConfig, val: TraceDataset | None = None) -> AllResult:
    """Alternate classifier ascent and erasure-probability descent on the masked log-likelihood.

    ``data`` is a :class:`TraceDataset` or any object with ``t``, ``n_classes``
    and ``sample(n, rng)``. Validation uses ``val`` if given, otherwise a
    fixed draw of ``cfg.val_size`` traces from the source.
    """
    cfg.validate()
    src = _as_source(data)
    t, k = src.t, src.n_classes
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    init_rng, theta_rng, eta_rng, val_rng, eval_rng = (np.random.default_rng(s) for s in seeds)
    if val is not None:
        vx, vy = val.traces, val.labels
    else:
        vx, vy = src.sample(cfg.val_size, val_rng)
    model = new_mlp([2 * t, *cfg.hidden, k], init_rng, cfg.dtype)
    params = ErasureParams.uniform(t, cfg.gamma_bar)
    rec = RunRecord(config={"kind": "all", **cfg.to_dict()})

    if cfg.pretrain_steps:
        pre = OptimizerState.for_model(model, lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay)
        for step in range(1, cfg.pretrain_steps + 1):
            loss = _theta_step(model, pre, src, params, cfg, theta_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite pretraining loss at step {step}")
        vr, vl = masked_validation_rank(model, vx, vy, params.gamma, np.random.default_rng(seeds[4]))
        log.info("pretrain done: val rank %.2f, val loss %.4f", vr, vl)
        limit = 0.95 * (k + 1) / 2
        if cfg.abort_on_failure and vr > limit:
            raise TrainingError(
                f"classifier failed to learn during pretraining: val rank {vr:.2f} > {limit:.2f}"
            )
        rec.val_steps.append(0)
        rec.val_ranks.append(vr)
        rec.val_losses.append(vl)

    theta_opt = OptimizerState.for_model(model, lr=cfg.lr_theta, weight_decay=cfg.weight_decay)
    eta_opt = OptimizerState.for_params([params.eta_tilde], [False], lr=cfg.lr_eta, weight_decay=0.0)
    n_theta = n_eta = 0
    bad = 0
    for step in range(1, cfg.steps + 1):
        loss = _theta_step(model, theta_opt, src, params, cfg, theta_rng)
        n_theta += 1
        for _ in range(cfg.ratio):
            x, y = src.sample(cfg.batch_size, eta_rng)
            g = rebar_gradient(model, (x, y), params, cfg.relaxation, eta_rng)
            optimizer_step(eta_opt, [params.eta_tilde], [g])
            n_eta += 1
        bad = 0 if np.isfinite(loss) else bad + 1
        if bad >= _MAX_BAD_STEPS:
            rec.status = "failed"
            log.error("ALL run diverged at step %d", step)
            break
        rec.steps.append(step)
        rec.losses.append(float(loss))
        if step % cfg.log_every == 0:
            rec.gamma_steps.append(step)
            rec.gammas.append(params.gamma.copy())
        if step % cfg.eval_every == 0:
            vr, vl = masked_validation_rank(model, vx, vy, params.gamma, eval_rng)
            rec.val_steps.append(step)
            rec.val_ranks.append(vr)
            rec.val_losses.append(vl)
    rec.assessment = params.gamma.copy()
    rec.checkpoints["final"] = model.copy()
    return AllResult(model, params, rec, n_theta, n_eta)


def pointwise_mi(
    model: MlpClassifier,
    x: np.ndarray,
    y,
    alpha_full: np.ndarray,
    alpha_sub: np.ndarray,
    noise: np.ndarray | None = None,
):
    """``log p(y | x kept by alpha_full) - log p(y | x kept by alpha_sub)`` for a masked-input classifier.

    Both evaluations share ``noise`` (zero fill if None). Returns one value per
    row, or a float for a single trace.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    full = np.asarray(alpha_full, dtype=np.float64)
    sub = np.asarray(alpha_sub, dtype=np.float64)
    rows = np.arange(x2.shape[0])
    lp_full = mlp_forward(model, build_masked_input(x2, full, noise))[rows, y]
    lp_sub = mlp_forward(model, build_masked_input(x2, sub, noise))[rows, y]
    out = lp_full - lp_sub
    return float(out[0]) if single else out
