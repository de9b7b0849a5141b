"""Monte Carlo conditional mutual information for the redundant Gaussian toy."""
from __future__ import annotations

import numpy as np
from scipy.special import log_expit

from leaklock.errors import DomainError


def binary_entropy_from_logit(a: np.ndarray) -> np.ndarray:
    """Entropy in nats of a Bernoulli whose log-odds are ``a`` (stable for large ``|a|``)."""
    p = np.exp(log_expit(a))
    return -(p * log_expit(a) + (1.0 - p) * log_expit(-a))


def cmi_oracle(sigma: float, n: int, samples: int = 1_000_000, seed: int = 0) -> float:
    """Estimate ``I[Y; X_1 | X_2..X_n]`` in nats where ``X_i | Y ~ N(Y, sigma^2)``.

    Uses the closed-form posterior ``p(Y=1 | x_S) = sigmoid(2 sum_S x_i / sigma^2)``
    and averages ``H(Y | X_2..X_n) - H(Y | X_1..X_n)`` over paired draws.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    rng = np.random.default_rng(seed)
    total = 0.0
    chunk = 200_000
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        y = 2.0 * rng.integers(0, 2, size=m) - 1.0
        x = y[:, None] + sigma * rng.normal(size=(m, n))
        rest = x[:, 1:].sum(axis=1)
        h_rest = binary_entropy_from_logit(2.0 * rest / sigma**2)
        h_all = binary_entropy_from_logit(2.0 * (rest + x[:, 0]) / sigma**2)
        total += float((h_rest - h_all).sum())
        done += m
    return total / samples
