"""Dense MLP classifier with hand-written reverse-mode gradients, AdamW, and schedules.

Matrices are plain ``numpy`` arrays of shape ``(rows, cols)``, float64 unless a
model is explicitly cast to float32 for speed. Weights
of layer ``i`` are stored as ``(fan_in, fan_out)`` so a forward pass is
``h @ W + b``.
"""
from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from leaklock.errors import DomainError, FormatError, ShapeError

log = logging.getLogger(__name__)

Matrix = np.ndarray

CHECKPOINT_MAGIC = b"LLMD"
CHECKPOINT_VERSION = 1


@dataclass
class MlpClassifier:
    """ReLU multilayer perceptron ending in a log-softmax over ``layer_dims[-1]`` classes."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2:
            raise ShapeError("an MLP needs at least an input and an output dimension")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("weights/biases do not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(f"layer {i}: got W{w.shape} b{b.shape}, expected W{expected}")

    @classmethod
    def zeros(cls, layer_dims: list[int], dtype=np.float64) -> MlpClassifier:
        dims = [int(d) for d in layer_dims]
        weights = [np.zeros((a, b), dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b, dtype=dtype) for b in dims[1:]]
        return cls(dims, weights, biases)

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order ``W0, b0, W1, b1, ...`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def decay_mask(self) -> list[bool]:
        return [True, False] * self.n_layers

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> MlpClassifier:
        return self.astype(self.dtype)

    def astype(self, dtype) -> MlpClassifier:
        """Copy with every parameter cast to ``dtype``."""
        return MlpClassifier(
            list(self.layer_dims),
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
        )


def _check_inputs(model: MlpClassifier, inputs: Matrix) -> np.ndarray:
    x = np.asarray(inputs, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs have shape {x.shape}, model expects (*, {model.input_dim})")
    return x


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_with_cache(model: MlpClassifier, inputs: Matrix) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass returning log-probabilities and the per-layer inputs needed by :func:`vjp`.

    ``cache[i]`` is the input to layer ``i`` (post-ReLU for ``i > 0``); the last
    entry holds the logits.
    """
    h = _check_inputs(model, inputs)
    cache = [h]
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w
        a += b
        if i < last:
            np.maximum(a, 0.0, out=a)
        cache.append(a)
        h = a
    return log_softmax(h), cache


def mlp_forward(model: MlpClassifier, inputs: Matrix) -> Matrix:
    """Per-row log-probabilities over the model's classes."""
    return forward_with_cache(model, inputs)[0]


def vjp(
    model: MlpClassifier,
    cache: list[np.ndarray],
    logprobs: np.ndarray,
    grad_logprobs: np.ndarray | None = None,
    *,
    grad_logits: np.ndarray | None = None,
    want_params: bool = True,
) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Vector-Jacobian product through the network.

    Pass either a cotangent on the log-probabilities or directly on the logits.
    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`MlpClassifier.params` (``None`` if ``want_params`` is false).
    """
    if grad_logits is None:
        probs = np.exp(logprobs)
        g = grad_logprobs - probs * grad_logprobs.sum(axis=1, keepdims=True)
    else:
        g = grad_logits
    grads: list[np.ndarray] = []
    for i in range(model.n_layers - 1, -1, -1):
        h_in = cache[i]
        if want_params:
            grads.append(g.sum(axis=0))
            grads.append(h_in.T @ g)
        g = g @ model.weights[i].T
        if i > 0:
            g *= h_in > 0
    param_grads = None
    if want_params:
        grads.reverse()
        param_grads = grads
    return param_grads, g


def nll_cotangent(labels: np.ndarray, n_classes: int, scale: float) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = scale
    return out


def check_labels(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64, copy=False)


def mlp_backward(
    model: MlpClassifier, inputs: Matrix, labels
) -> tuple[float, list[np.ndarray], Matrix]:
    """Mean negative log-likelihood with exact gradients wrt parameters and inputs."""
    y = check_labels(labels, model.n_classes)
    logp, cache = forward_with_cache(model, inputs)
    if y.shape[0] != logp.shape[0]:
        raise ShapeError("labels and inputs disagree on row count")
    n = y.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    grads, gx = vjp(model, cache, logp, nll_cotangent(y, model.n_classes, -1.0 / n))
    return loss, grads, gx


# -- optimizer ---------------------------------------------------------------


@dataclass
class LrSchedule:
    kind: str = "constant"
    base: float = 1e-3
    total_steps: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine"):
            raise DomainError(f"unknown schedule {self.kind!r}")

    def rate(self, step: int) -> float:
        if self.kind == "constant":
            return self.base
        frac = min(step, self.total_steps) / max(self.total_steps, 1)
        return self.base * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """AdamW state with decoupled weight decay; ``decay_mask`` selects which tensors decay."""

    shapes: list[tuple[int, ...]]
    decay_mask: list[bool]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    schedule: LrSchedule | None = None
    step: int = 0
    skipped: int = 0
    dtype: str = "float64"
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros(s, dtype=self.dtype) for s in self.shapes]
            self.v = [np.zeros(s, dtype=self.dtype) for s in self.shapes]

    @classmethod
    def for_params(cls, params: list[np.ndarray], decay_mask: list[bool] | None = None, **kw) -> OptimizerState:
        mask = decay_mask if decay_mask is not None else [True] * len(params)
        kw.setdefault("dtype", str(params[0].dtype) if params else "float64")
        return cls([p.shape for p in params], list(mask), **kw)

    @classmethod
    def for_model(cls, model: MlpClassifier, **kw) -> OptimizerState:
        return cls.for_params(model.params(), model.decay_mask(), **kw)

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.lr
        return self.schedule.rate(self.step)


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> bool:
    """Apply one AdamW update in place. Returns False when the step was skipped."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params/grads/state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != m.shape or g.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step)
        return False
    lr = state.current_lr()
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v, decay in zip(params, grads, state.m, state.v, state.decay_mask):
        if decay and state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p -= (lr / bc1) * m / denom
    return True


def xavier_init(model: MlpClassifier, rng: np.random.Generator) -> MlpClassifier:
    """Glorot-uniform weights on every layer (output included), zero biases. In place."""
    for w, b in zip(model.weights, model.biases):
        fan_in, fan_out = w.shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = 0.0
    return model


def new_mlp(layer_dims: list[int], rng: np.random.Generator, dtype=np.float64) -> MlpClassifier:
    """Xavier-initialized MLP; the draw is done in float64 so it does not depend on ``dtype``."""
    model = xavier_init(MlpClassifier.zeros(layer_dims), rng)
    return model if np.dtype(dtype) == np.float64 else model.astype(dtype)


# -- checkpoint file ---------------------------------------------------------


def model_to_bytes(model: MlpClassifier) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, model.n_layers)]
    for w in model.weights:
        parts.append(struct.pack("<II", *w.shape))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def model_from_bytes(data: bytes) -> MlpClassifier:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an LLMD checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC32 mismatch")
    version, n_layers = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", body, off))
        off += 8
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        n = fan_in * fan_out
        weights.append(np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(fan_in, fan_out).astype(np.float64))
        off += 8 * n
        biases.append(np.frombuffer(body, dtype="<f8", count=fan_out, offset=off).astype(np.float64))
        off += 8 * fan_out
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    dims = [shapes[0][0]] + [s[1] for s in shapes]
    return MlpClassifier(dims, weights, biases)


def save_model(model: MlpClassifier, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> MlpClassifier:
    return model_from_bytes(Path(path).read_bytes())
