"""Synthetic AES power traces under a Hamming-weight leakage model.

Each trace is the sum of a data-dependent term, an operation-dependent term
and residual Gaussian noise. A handful of timesteps process the first-round
SubBytes output ``y = Sbox(k ^ w)``; every other timestep processes random
bytes. Optional countermeasures are applied in the order
masking -> shuffling -> random no-ops -> low-pass filtering.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from leaklock.datagen.dataset import SHARE_PREFIX, TraceDataset, standardize_fit, standardize_traces
from leaklock.errors import ConfigError

# fmt: off
SBOX = np.array([
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
], dtype=np.uint8)
# fmt: on

INV_SBOX = np.empty(256, dtype=np.uint8)
INV_SBOX[SBOX] = np.arange(256, dtype=np.uint8)

HW_TABLE = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def sbox(b):
    return SBOX[np.asarray(b, dtype=np.int64)]


def inv_sbox(b):
    return INV_SBOX[np.asarray(b, dtype=np.int64)]


def hamming_weight(b):
    return HW_TABLE[np.asarray(b, dtype=np.int64)]


def lowpass_filter(traces: np.ndarray, beta: float) -> np.ndarray:
    """Causal exponential moving average along the last axis: ``y[t] = beta*y[t-1] + (1-beta)*x[t]``, ``y[0] = x[0]``."""
    if not 0.0 <= beta < 1.0:
        raise ConfigError("low-pass beta must lie in [0, 1)")
    x = np.array(traces, dtype=np.float64, copy=True)
    if beta == 0.0:
        return x
    for t in range(1, x.shape[-1]):
        x[..., t] = beta * x[..., t - 1] + (1.0 - beta) * x[..., t]
    return x


@dataclass
class SyntheticAesConfig:
    n: int = 10_000
    t: int = 101
    n_bits: int = 8
    n_ops: int = 32
    n_lkg: int = 1
    var_data: float = 1.0
    var_op: float = 1.0
    var_resid: float = 1.0
    lowpass_beta: float = 0.5
    max_no_ops: int = 0
    shuffle_locations: int = 1
    boolean_masking: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.n_bits != 8:
            raise ConfigError("only n_bits=8 is supported (the AES S-box is a byte map)")
        if self.n < 0 or self.t < 1 or self.n_ops < 1 or self.n_lkg < 0:
            raise ConfigError("counts must be nonnegative (t, n_ops positive)")
        if min(self.var_data, self.var_op, self.var_resid) < 0:
            raise ConfigError("variances must be nonnegative")
        if self.shuffle_locations < 1 or self.max_no_ops < 0:
            raise ConfigError("shuffle_locations >= 1 and max_no_ops >= 0 required")
        if not 0.0 <= self.lowpass_beta < 1.0:
            raise ConfigError("lowpass_beta must lie in [0, 1)")
        if self.slots_needed() > self.t:
            raise ConfigError(
                f"{self.slots_needed()} leaky placements do not fit in T={self.t} timesteps"
            )

    def slots_needed(self) -> int:
        return self.n_lkg * self.shuffle_locations * (2 if self.boolean_masking else 1)

    def to_dict(self) -> dict:
        return asdict(self)


class SyntheticAesDevice:
    """Fixed per-dataset structure: operation sequence, operation powers, leaky slot layout.

    ``slots[j, s]`` is the ``s``-th candidate timestep of leaky operation ``j``;
    with Boolean masking, operations come in pairs (mask share, masked share).
    """

    def __init__(self, cfg: SyntheticAesConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.ops = rng.integers(0, cfg.n_ops, size=cfg.t)
        self.op_power = rng.normal(0.0, np.sqrt(cfg.var_op), size=cfg.n_ops)
        self.noop_power = float(rng.normal(0.0, np.sqrt(cfg.var_op)))
        n_leaky_ops = cfg.n_lkg * (2 if cfg.boolean_masking else 1)
        chosen = rng.choice(cfg.t, size=n_leaky_ops * cfg.shuffle_locations, replace=False)
        self.slots = chosen.reshape(n_leaky_ops, cfg.shuffle_locations)

    @property
    def leaky_timesteps(self) -> np.ndarray:
        """Ground-truth timesteps after accounting for shuffling and no-op shifts."""
        base = np.unique(self.slots)
        shifts = np.arange(self.cfg.max_no_ops + 1)
        gt = (base[:, None] + shifts[None, :]).ravel()
        return np.unique(gt[gt < self.cfg.t])

    def _data_power(self, d: np.ndarray) -> np.ndarray:
        # unit variance over uniform bytes: Var(HW) = n_bits/4
        half = self.cfg.n_bits / 2
        return np.sqrt(self.cfg.var_data) * (half - HW_TABLE[d]) / np.sqrt(self.cfg.n_bits / 4)

    def sample(self, n: int, rng: np.random.Generator, fixed_key: int | None = None) -> dict[str, np.ndarray]:
        cfg = self.cfg
        t = cfg.t
        if fixed_key is None:
            keys = rng.integers(0, 256, size=n)
        else:
            keys = np.full(n, int(fixed_key), dtype=np.int64)
        plaintexts = rng.integers(0, 256, size=n)
        y = SBOX[keys ^ plaintexts].astype(np.int64)
        data = rng.integers(0, 256, size=(n, t))
        op_power = np.broadcast_to(self.op_power[self.ops], (n, t)).copy()
        out = {"key": keys, "plaintext": plaintexts, "label": y}

        if cfg.boolean_masking:
            mask = rng.integers(0, 256, size=n)
            values = [mask if j % 2 == 0 else y ^ mask for j in range(self.slots.shape[0])]
            out["mask"] = mask
            out["masked"] = y ^ mask
        else:
            values = [y] * self.slots.shape[0]
        rows = np.arange(n)
        for j, value in enumerate(values):
            data[rows, self.slots[j, 0]] = value

        if cfg.shuffle_locations > 1:
            for j in range(self.slots.shape[0]):
                cand = self.slots[j]
                perm = np.argsort(rng.random((n, cand.size)), axis=1)
                src = cand[perm]
                data[rows[:, None], cand[None, :]] = data[rows[:, None], src]
                op_power[rows[:, None], cand[None, :]] = op_power[rows[:, None], src]

        x = self._data_power(data) + op_power + rng.normal(0.0, np.sqrt(cfg.var_resid), size=(n, t))

        if cfg.max_no_ops > 0:
            shift = rng.integers(0, cfg.max_no_ops + 1, size=n)
            pad_data = rng.integers(0, 256, size=(n, cfg.max_no_ops))
            pad = (
                self._data_power(pad_data)
                + self.noop_power
                + rng.normal(0.0, np.sqrt(cfg.var_resid), size=(n, cfg.max_no_ops))
            )
            full = np.concatenate([pad, x], axis=1)
            # row i keeps its last `shift[i]` no-op samples at the head, then the first T - shift samples
            start = cfg.max_no_ops - shift
            idx = start[:, None] + np.arange(t)[None, :]
            x = full[rows[:, None], idx]
            out["delay"] = shift

        out["traces"] = lowpass_filter(x, cfg.lowpass_beta)
        return out


def gen_synthetic_aes(
    cfg: SyntheticAesConfig,
    *,
    fixed_key: int | None = None,
    trace_seed: int | None = None,
    device: SyntheticAesDevice | None = None,
) -> TraceDataset:
    """Generate ``cfg.n`` traces. The device layout depends only on ``cfg.seed``;
    pass ``trace_seed`` to draw a different set of traces from the same device."""
    device = device or SyntheticAesDevice(cfg)
    seed = cfg.seed if trace_seed is None else trace_seed
    rng = np.random.default_rng([seed, 1])
    s = device.sample(cfg.n, rng, fixed_key=fixed_key)
    aux = {"key": s["key"], "plaintext": s["plaintext"]}
    if cfg.boolean_masking:
        aux[SHARE_PREFIX + "mask"] = s["mask"]
        aux[SHARE_PREFIX + "masked"] = s["masked"]
    else:
        aux[SHARE_PREFIX + "y"] = s["label"]
    return TraceDataset(s["traces"], s["label"], 256, aux, ground_truth=device.leaky_timesteps)


class AesStream:
    """Infinite dataset: every call draws fresh traces from one device.

    With ``standardize_n > 0`` traces are standardized using statistics fitted
    once on that many initial draws.
    """

    def __init__(self, cfg: SyntheticAesConfig, standardize_n: int = 0):
        self.device = SyntheticAesDevice(cfg)
        self.t = cfg.t
        self.n_classes = 256
        self.stats = None
        if standardize_n:
            x = self.device.sample(standardize_n, np.random.default_rng([cfg.seed, 2]))["traces"]
            self.stats = standardize_fit(TraceDataset(x, np.zeros(standardize_n, dtype=np.int64), 256))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        s = self.device.sample(n, rng)
        x = s["traces"] if self.stats is None else standardize_traces(s["traces"], self.stats)
        return x, s["label"]
