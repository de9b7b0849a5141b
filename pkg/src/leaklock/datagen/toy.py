"""Gaussian toy datasets with binary labels ``Y in {-1, +1}`` stored as ``{0, 1}``."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from leaklock.datagen.dataset import SHARE_PREFIX, TraceDataset
from leaklock.errors import ConfigError

SECOND_ORDER_FEATURES = ("x_rand", "x_1o", "x_2o1", "x_2o2")


@dataclass
class ToyConfig:
    variant: str = "second_order"
    sigma2: float = 0.5
    n_leaky: int = 1
    n: int = 100_000
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in ("second_order", "redundant"):
            raise ConfigError(f"unknown toy variant {self.variant!r}")
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if self.variant == "redundant" and self.n_leaky < 1:
            raise ConfigError("redundant toy needs n_leaky >= 1")

    @property
    def t(self) -> int:
        return 4 if self.variant == "second_order" else self.n_leaky + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _signs(rng: np.random.Generator, n: int) -> np.ndarray:
    return 2.0 * rng.integers(0, 2, size=n) - 1.0


def _to_index(s: np.ndarray) -> np.ndarray:
    return ((s + 1) // 2).astype(np.int64)


def sample_second_order(n: int, sigma2: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    y = _signs(rng, n)
    m = _signs(rng, n)
    masked = np.where(y != m, 1.0, -1.0)  # y XOR m in the +-1 encoding
    x = np.empty((n, 4))
    x[:, 0] = rng.normal(0.0, 1.0, n)
    x[:, 1] = rng.normal(y, np.sqrt(sigma2))
    x[:, 2] = rng.normal(masked, 1.0)
    x[:, 3] = rng.normal(m, 1.0)
    return {"traces": x, "label": _to_index(y), "mask": _to_index(m), "masked": _to_index(masked)}


def sample_redundant(n: int, sigma2: float, n_leaky: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    y = _signs(rng, n)
    x = np.empty((n, n_leaky + 1))
    x[:, 0] = rng.normal(0.0, 1.0, n)
    x[:, 1:] = y[:, None] + np.sqrt(sigma2) * rng.normal(size=(n, n_leaky))
    return {"traces": x, "label": _to_index(y)}


def gen_toy_second_order(cfg: ToyConfig) -> TraceDataset:
    """Features ``(X_rand, X_1o, X_2o1, X_2o2)``; only the pair ``X_2o1, X_2o2`` jointly reveals Y."""
    cfg.validate()
    if cfg.variant != "second_order":
        raise ConfigError("gen_toy_second_order needs variant='second_order'")
    s = sample_second_order(cfg.n, cfg.sigma2, np.random.default_rng(cfg.seed))
    aux = {SHARE_PREFIX + "mask": s["mask"], SHARE_PREFIX + "masked": s["masked"]}
    return TraceDataset(s["traces"], s["label"], 2, aux, ground_truth=np.array([1, 2, 3]))


def gen_toy_redundant(cfg: ToyConfig) -> TraceDataset:
    """One nonleaky feature ``X_0`` followed by ``n_leaky`` i.i.d. copies of ``N(Y, sigma2)``."""
    cfg.validate()
    if cfg.variant != "redundant":
        raise ConfigError("gen_toy_redundant needs variant='redundant'")
    s = sample_redundant(cfg.n, cfg.sigma2, cfg.n_leaky, np.random.default_rng(cfg.seed))
    aux = {SHARE_PREFIX + "y": s["label"]}
    return TraceDataset(
        s["traces"], s["label"], 2, aux, ground_truth=np.arange(1, cfg.n_leaky + 1)
    )


def gen_toy(cfg: ToyConfig) -> TraceDataset:
    return gen_toy_second_order(cfg) if cfg.variant == "second_order" else gen_toy_redundant(cfg)


class ToyStream:
    """Streaming version of the toy datasets (fresh draws on every batch)."""

    def __init__(self, cfg: ToyConfig):
        cfg.validate()
        self.cfg = cfg
        self.t = cfg.t
        self.n_classes = 2

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.cfg.variant == "second_order":
            s = sample_second_order(n, self.cfg.sigma2, rng)
        else:
            s = sample_redundant(n, self.cfg.sigma2, self.cfg.n_leaky, rng)
        return s["traces"], s["label"]
