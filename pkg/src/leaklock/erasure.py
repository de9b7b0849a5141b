"""Erasure probabilities, mask sampling and gradient estimators for the erasure player.

Timestep ``t`` is erased with probability ``gamma_t``. The vector ``gamma`` is a
deterministic function of free logits ``eta_tilde`` chosen so that the total
cost ``sum_t gamma_t / (1 - gamma_t)`` always equals a fixed budget.

Internally most of the work happens in terms of keep-logits
``phi_t = logit(1 - gamma_t)``; a mask entry ``b_t = 1`` means "kept".
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logit, logsumexp, softmax

from leaklock.errors import CapacityError, ConfigError, DomainError, ShapeError, TrainingError
from leaklock.ndmath import MlpClassifier, forward_with_cache, vjp

log = logging.getLogger(__name__)

MAX_EXACT_T = 16
_U_CLIP = 1e-12
_NEG_TINY = -np.finfo(np.float64).tiny


def cost(gamma):
    """Per-timestep cost ``gamma / (1 - gamma)``."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g >= 1) or np.any(g < 0) or np.any(np.isnan(g)):
        raise DomainError("cost is defined for gamma in [0, 1)")
    out = g / (1.0 - g)
    return float(out) if out.ndim == 0 else out


@dataclass
class ErasureParams:
    eta_tilde: np.ndarray
    gamma_bar: float = 0.5

    def __post_init__(self) -> None:
        self.eta_tilde = np.asarray(self.eta_tilde, dtype=np.float64)
        if self.eta_tilde.ndim != 1 or self.eta_tilde.size == 0:
            raise ShapeError("eta_tilde must be a nonempty vector")
        if not 0.0 < self.gamma_bar < 1.0:
            raise ConfigError("gamma_bar must lie in (0, 1)")

    @classmethod
    def uniform(cls, t: int, gamma_bar: float = 0.5) -> ErasureParams:
        return cls(np.zeros(t), gamma_bar)

    @property
    def t(self) -> int:
        return self.eta_tilde.size

    @property
    def log_budget(self) -> float:
        return float(np.log(self.t) + np.log(self.gamma_bar) - np.log1p(-self.gamma_bar))

    @property
    def budget(self) -> float:
        return self.t * self.gamma_bar / (1.0 - self.gamma_bar)

    @property
    def erase_logits(self) -> np.ndarray:
        """``logit(gamma)``, i.e. ``log C + log_softmax(eta_tilde)``."""
        return self.log_budget + self.eta_tilde - logsumexp(self.eta_tilde)

    @property
    def keep_logits(self) -> np.ndarray:
        return -self.erase_logits

    @property
    def gamma(self) -> np.ndarray:
        return expit(self.erase_logits)


def gamma_from_eta(params: ErasureParams) -> np.ndarray:
    return params.gamma


def phi_grad_to_eta(params: ErasureParams, grad_phi: np.ndarray) -> np.ndarray:
    """Chain a gradient wrt the keep-logits back to ``eta_tilde``."""
    sm = softmax(params.eta_tilde)
    return -grad_phi + sm * grad_phi.sum(axis=-1, keepdims=True)


@dataclass
class RelaxationConfig:
    temperature: float = 0.5
    control_scale: float = 1.0
    noise_fill: str = "gaussian"

    def __post_init__(self) -> None:
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError("temperature must be finite and positive")
        if not self.control_scale >= 0:
            raise ConfigError("control_scale must be nonnegative")
        if self.noise_fill not in ("gaussian", "zero"):
            raise ConfigError(f"unknown noise_fill {self.noise_fill!r}")


@dataclass
class MaskSample:
    hard: np.ndarray
    z: np.ndarray
    z_tilde: np.ndarray | None = None
    temperature: float = 0.5
    _u: np.ndarray | None = field(default=None, repr=False)

    def relaxed(self, lam: float | None = None) -> tuple[np.ndarray, np.ndarray | None]:
        lam = self.temperature if lam is None else lam
        soft_tilde = None if self.z_tilde is None else expit(self.z_tilde / lam)
        return expit(self.z / lam), soft_tilde


def _uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.random(shape), _U_CLIP, 1.0 - _U_CLIP)


def _sample_keep(phi: np.ndarray, shape, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    z = phi + logit(_uniform(rng, shape))
    return (z >= 0).astype(np.float64), z


def sample_mask(gamma, rng: np.random.Generator, n: int | None = None, temperature: float = 0.5) -> MaskSample:
    """Draw keep masks with ``P(b_t = 1) = 1 - gamma_t`` via the logistic reparametrization."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0) or np.any(g >= 1):
        raise DomainError("gamma must lie strictly inside (0, 1)")
    phi = np.log1p(-g) - np.log(g)
    shape = g.shape if n is None else (n,) + g.shape
    b, z = _sample_keep(phi, shape, rng)
    return MaskSample(b, z, temperature=temperature)


def _resample_from_phi(phi: np.ndarray, b: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``z~`` given ``b`` plus ``dz~/dphi`` (both in log space for stability)."""
    log_p = log_expit(phi)
    log_q = log_expit(-phi)  # log(1 - p)
    p = np.exp(log_p)
    q = np.exp(log_q)
    kept = b > 0.5
    # kept: u' = (1-p) + v p, so 1 - u' = p (1 - v)
    log_u_k = np.log1p(-p * (1.0 - v))
    log_1mu_k = log_p + np.log1p(-v)
    # erased: u' = v (1-p)
    log_u_e = np.log(v) + log_q
    log_1mu_e = np.log1p(-v * q)
    z_t = phi + np.where(kept, log_u_k - log_1mu_k, log_u_e - log_1mu_e)
    z_t = np.where(kept, np.maximum(z_t, 0.0), np.minimum(z_t, _NEG_TINY))
    dz = np.where(
        kept,
        np.exp(log_p + np.log(v) - log_u_k),
        np.exp(log_q + np.log1p(-v) - log_1mu_e),
    )
    return z_t, dz


def conditional_resample(gamma, b, rng: np.random.Generator) -> np.ndarray:
    """Draw ``z~`` from the logistic reparametrization conditioned on ``hard(z~) = b``."""
    g = np.asarray(gamma, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any((b != 0) & (b != 1)):
        raise DomainError("b must be binary")
    phi = np.log1p(-g) - np.log(g)
    z_t, _ = _resample_from_phi(phi, b, _uniform(rng, b.shape))
    return z_t


# -- objective evaluation ----------------------------------------------------


def build_masked_input(x: np.ndarray, alpha: np.ndarray, noise: np.ndarray | None) -> np.ndarray:
    """``[x * alpha + noise * (1 - alpha), alpha]`` along the last axis (zero fill if ``noise`` is None)."""
    alpha = np.broadcast_to(alpha, x.shape)
    kept = x * alpha
    if noise is not None:
        kept = kept + noise * (1.0 - alpha)
    return np.concatenate([kept, alpha], axis=-1)


def _fill(cfg: RelaxationConfig, shape, rng: np.random.Generator | None) -> np.ndarray | None:
    if cfg.noise_fill == "zero":
        return None
    if rng is None:
        raise ConfigError("gaussian noise fill needs an rng")
    return rng.standard_normal(shape)


def _check_model(model: MlpClassifier, t: int) -> None:
    if model.input_dim != 2 * t:
        raise ShapeError(f"model input dim {model.input_dim} != 2 * T = {2 * t}")


def _evaluate(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    alpha: np.ndarray,
    noise: np.ndarray | None,
    want_grad: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Mean label log-likelihood per mask.

    ``x``/``noise`` are ``(M, D, T)`` (broadcastable), ``y`` is ``(M, D)`` and
    ``alpha`` is ``(M, T)``. Returns ``f`` of shape ``(M,)`` and optionally
    ``df/dalpha`` of shape ``(M, T)``.
    """
    m, t = alpha.shape
    d = y.shape[1]
    a = alpha[:, None, :]
    xb = np.broadcast_to(x, (m, d, t))
    inp = build_masked_input(xb, np.broadcast_to(a, (m, d, t)), None if noise is None else np.broadcast_to(noise, (m, d, t)))
    logp, cache = forward_with_cache(model, inp.reshape(m * d, 2 * t))
    rows = np.arange(m * d)
    flat_y = y.reshape(-1)
    f = logp[rows, flat_y].reshape(m, d).mean(axis=1)
    if not want_grad:
        return f, None
    g_logits = -np.exp(logp)
    g_logits[rows, flat_y] += 1.0
    g_logits /= d
    _, g_in = vjp(model, cache, logp, grad_logits=g_logits, want_params=False)
    g_in = g_in.reshape(m, d, 2 * t)
    diff = xb if noise is None else xb - noise
    grad = (g_in[..., :t] * diff + g_in[..., t:]).sum(axis=1)
    return f, grad


def masked_objective(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    alpha: np.ndarray,
    cfg: RelaxationConfig | None = None,
    *,
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Mean label log-likelihood of the classifier on soft-masked inputs.

    ``alpha`` is a single ``(T,)`` mask shared by all rows or an ``(N, T)`` per-row
    mask. Returns ``(value, grads wrt params, grad wrt alpha)``; the alpha
    gradient has the same shape as ``alpha``.
    """
    cfg = cfg or RelaxationConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("x must be (N, T) with one label per row")
    n, t = x.shape
    _check_model(model, t)
    if alpha.shape not in ((t,), (n, t)):
        raise ShapeError(f"alpha must be ({t},) or ({n}, {t})")
    if noise is None and cfg.noise_fill == "gaussian":
        noise = _fill(cfg, x.shape, rng)
    inp = build_masked_input(x, alpha, noise)
    logp, cache = forward_with_cache(model, inp)
    rows = np.arange(n)
    value = float(logp[rows, y].mean())
    g_logits = -np.exp(logp)
    g_logits[rows, y] += 1.0
    g_logits /= n
    grads, g_in = vjp(model, cache, logp, grad_logits=g_logits)
    diff = x if noise is None else x - noise
    g_alpha = g_in[:, :t] * diff + g_in[:, t:]
    if alpha.ndim == 1:
        g_alpha = g_alpha.sum(axis=0)
    return value, grads, g_alpha


# -- estimators --------------------------------------------------------------


def _layout(x: np.ndarray, y: np.ndarray, n_masks: int | None) -> tuple[np.ndarray, np.ndarray, int]:
    """Shape the batch for :func:`_evaluate`.

    ``n_masks=None`` gives every row its own mask (M = N, D = 1); otherwise
    each of the ``n_masks`` masks is applied to the whole batch.
    """
    if n_masks is None:
        return x[:, None, :], y[:, None], x.shape[0]
    return x[None], np.broadcast_to(y[None], (n_masks, y.size)), n_masks


def _rebar_phi(
    model: MlpClassifier,
    xs: np.ndarray,
    ys: np.ndarray,
    phi: np.ndarray,
    cfg: RelaxationConfig,
    rng: np.random.Generator,
    m: int,
) -> np.ndarray:
    t = phi.size
    lam, kappa = cfg.temperature, cfg.control_scale
    b, z = _sample_keep(phi, (m, t), rng)
    noise = _fill(cfg, (m, ys.shape[1], t), rng)
    v = _uniform(rng, (m, t))
    p = expit(phi)
    f_b, _ = _evaluate(model, xs, ys, b, noise, want_grad=False)
    score = b - p
    if kappa == 0.0:
        return f_b[:, None] * score
    z_t, dz_t = _resample_from_phi(phi, b, v)
    s = expit(z / lam)
    s_t = expit(z_t / lam)
    _, g_s = _evaluate(model, xs, ys, s, noise, want_grad=True)
    f_st, g_st = _evaluate(model, xs, ys, s_t, noise, want_grad=True)
    return (
        (f_b - kappa * f_st)[:, None] * score
        + kappa * g_s * s * (1.0 - s) / lam
        - kappa * g_st * s_t * (1.0 - s_t) / lam * dz_t
    )


def _reinforce_phi(model, xs, ys, phi, cfg, rng, m) -> np.ndarray:
    b, _ = _sample_keep(phi, (m, phi.size), rng)
    noise = _fill(cfg, (m, ys.shape[1], phi.size), rng)
    f_b, _ = _evaluate(model, xs, ys, b, noise, want_grad=False)
    return f_b[:, None] * (b - expit(phi))


def _estimates(kernel, model, x, y, params, cfg, rng, n_masks) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("x must be (N, T) with one label per row")
    if x.shape[1] != params.t:
        raise ShapeError("batch width does not match eta_tilde")
    _check_model(model, params.t)
    xs, ys, m = _layout(x, y, n_masks)
    phi = params.keep_logits
    est = kernel(model, xs, ys, phi, cfg, rng, m)
    bad = ~np.all(np.isfinite(est), axis=1)
    if bad.any():
        log.warning("resampling %d non-finite gradient estimates", int(bad.sum()))
        idx = np.flatnonzero(bad)
        sub_x = xs[idx] if n_masks is None else xs
        sub_y = ys[idx]
        redo = kernel(model, sub_x, sub_y, phi, cfg, rng, idx.size)
        if not np.all(np.isfinite(redo)):
            raise TrainingError("non-finite gradient estimate after resampling")
        est[idx] = redo
    return phi_grad_to_eta(params, est)


def rebar_estimates(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    params: ErasureParams,
    cfg: RelaxationConfig,
    rng: np.random.Generator,
    n_masks: int | None = None,
) -> np.ndarray:
    """Independent REBAR estimates of ``d/d eta_tilde E[f]``, one row per mask.

    With ``n_masks=None`` each batch row draws its own mask and contributes a
    single-row estimate; otherwise ``n_masks`` masks each score the full batch.
    """
    return _estimates(_rebar_phi, model, x, y, params, cfg, rng, n_masks)


def reinforce_estimates(model, x, y, params, cfg, rng, n_masks=None) -> np.ndarray:
    return _estimates(_reinforce_phi, model, x, y, params, cfg, rng, n_masks)


def rebar_gradient(
    model: MlpClassifier,
    batch: tuple[np.ndarray, np.ndarray],
    params: ErasureParams,
    cfg: RelaxationConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Minibatch REBAR estimate: every row gets its own mask and the estimates are averaged."""
    x, y = batch
    return rebar_estimates(model, x, y, params, cfg, rng).mean(axis=0)


def reinforce_gradient(
    model: MlpClassifier,
    batch: tuple[np.ndarray, np.ndarray],
    params: ErasureParams,
    rng: np.random.Generator,
    cfg: RelaxationConfig | None = None,
) -> np.ndarray:
    x, y = batch
    return reinforce_estimates(model, x, y, params, cfg or RelaxationConfig(), rng).mean(axis=0)


# -- exact enumeration -------------------------------------------------------


def all_masks(t: int) -> np.ndarray:
    """Every binary mask of length ``t``; row ``i`` holds the bits of ``i`` (bit 0 first)."""
    if t > MAX_EXACT_T:
        raise CapacityError(f"exact enumeration supports T <= {MAX_EXACT_T}, got {t}")
    idx = np.arange(2**t)[:, None]
    return ((idx >> np.arange(t)) & 1).astype(np.float64)


def exact_expectation(f_table: np.ndarray, gamma: np.ndarray) -> tuple[float, np.ndarray]:
    """``E f`` over keep masks and its gradient wrt ``gamma``.

    ``f_table[i]`` is ``f`` at the mask whose bit ``t`` is bit ``t`` of ``i``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    masks = all_masks(gamma.size)
    f_table = np.asarray(f_table, dtype=np.float64)
    if f_table.shape != (masks.shape[0],):
        raise ShapeError("f_table needs one entry per mask")
    keep = 1.0 - gamma
    log_mass = masks @ np.log(keep) + (1.0 - masks) @ np.log(gamma)
    w = np.exp(log_mass) * f_table
    value = float(w.sum())
    # dE/dkeep_t = sum_a w(a) (a_t - keep_t) / (keep_t (1 - keep_t))
    grad_keep = (w[:, None] * (masks - keep)).sum(axis=0) / (keep * gamma)
    return value, -grad_keep


def mask_table(model: MlpClassifier, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Zero-fill objective at every mask over a fixed dataset."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    t = x.shape[1]
    _check_model(model, t)
    masks = all_masks(t)
    out = np.empty(masks.shape[0])
    for lo in range(0, masks.shape[0], chunk):
        a = masks[lo:lo + chunk]
        ys = np.broadcast_to(y[None], (a.shape[0], y.size))
        out[lo:lo + chunk], _ = _evaluate(model, x[None], ys, a, None, want_grad=False)
    return out


def exact_gradient(
    model: MlpClassifier,
    dataset: tuple[np.ndarray, np.ndarray],
    params: ErasureParams,
    cfg: RelaxationConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Exact zero-fill objective and its ``eta_tilde`` gradient by enumerating all masks."""
    if params.t > MAX_EXACT_T:
        raise CapacityError(f"exact enumeration supports T <= {MAX_EXACT_T}, got {params.t}")
    x, y = dataset
    table = mask_table(model, x, y)
    value, grad_gamma = exact_expectation(table, params.gamma)
    gamma = params.gamma
    # d gamma / d phi = -gamma (1 - gamma)
    grad_phi = -grad_gamma * gamma * (1.0 - gamma)
    return value, phi_grad_to_eta(params, grad_phi)


def exact_gamma_gradient(model, dataset, params) -> tuple[float, np.ndarray]:
    """Like :func:`exact_gradient` but differentiates wrt ``gamma`` directly."""
    x, y = dataset
    return exact_expectation(mask_table(model, x, y), params.gamma)
