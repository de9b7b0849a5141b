"""The trace dataset container, standardization, splitting, and the SCLD file format."""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from leaklock.errors import ConfigError, FormatError, ShapeError

SCLD_MAGIC = b"SCLD"
SCLD_VERSION = 1
FLAG_GROUND_TRUTH = 1
FLAG_STANDARDIZED = 2

SHARE_PREFIX = "share:"


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of features with zero spread on the fit split


@dataclass
class TraceDataset:
    """``N x T`` traces with integer labels and optional auxiliary columns.

    Auxiliary columns whose name starts with ``share:`` are the random shares
    of the sensitive variable (used by the omniscient GMM assessment).
    """

    traces: np.ndarray
    labels: np.ndarray
    n_classes: int
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    ground_truth: np.ndarray | None = None
    stats: StandardizationStats | None = None

    def __post_init__(self) -> None:
        self.traces = np.asarray(self.traces, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.traces.ndim != 2:
            raise ShapeError("traces must be a 2-D array")
        n, t = self.traces.shape
        if self.labels.shape != (n,):
            raise ShapeError("labels must have one entry per trace")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ShapeError("labels out of range for n_classes")
        for name, col in self.aux.items():
            if np.asarray(col).shape != (n,):
                raise ShapeError(f"auxiliary column {name!r} has wrong length")
        if self.ground_truth is not None:
            gt = np.unique(np.asarray(self.ground_truth, dtype=np.int64))
            if gt.size and (gt.min() < 0 or gt.max() >= t):
                raise ShapeError("ground-truth index out of range")
            self.ground_truth = gt

    @property
    def n(self) -> int:
        return self.traces.shape[0]

    @property
    def t(self) -> int:
        return self.traces.shape[1]

    def share_columns(self) -> dict[str, np.ndarray]:
        return {k[len(SHARE_PREFIX):]: v for k, v in self.aux.items() if k.startswith(SHARE_PREFIX)}

    def subset(self, idx: np.ndarray) -> TraceDataset:
        return replace(
            self,
            traces=self.traces[idx],
            labels=self.labels[idx],
            aux={k: v[idx] for k, v in self.aux.items()},
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.traces).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def standardize_fit(dataset: TraceDataset) -> StandardizationStats:
    """Per-feature mean/std of the (profiling) dataset; zero-spread features are flagged."""
    mean = dataset.traces.mean(axis=0)
    std = dataset.traces.std(axis=0)
    constant = ~(std > 0)
    return StandardizationStats(mean, np.where(constant, 1.0, std), constant)


def standardize_traces(traces: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    out = (traces - stats.mean) / stats.std
    out[:, stats.constant] = 0.0
    return out


def standardize_apply(dataset: TraceDataset, stats: StandardizationStats) -> TraceDataset:
    return replace(dataset, traces=standardize_traces(dataset.traces, stats), stats=stats)


def split(
    dataset: TraceDataset, fractions: tuple[float, ...], seed: int
) -> tuple[TraceDataset, ...]:
    """Disjoint shuffled partition; sizes are floor-rounded with the remainder going to the first split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError("split fractions must be nonnegative and sum to 1")
    n = dataset.n
    sizes = np.floor(fr * n + 1e-9).astype(int)
    sizes[0] += n - sizes.sum()
    if np.any(sizes[fr > 0] == 0):
        raise ConfigError(f"split {tuple(fractions)} of N={n} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(dataset.subset(np.sort(perm[a:b])) for a, b in zip(bounds[:-1], bounds[1:]))


# -- SCLD binary format ------------------------------------------------------


def dataset_to_bytes(ds: TraceDataset) -> bytes:
    flags = 0
    if ds.ground_truth is not None:
        flags |= FLAG_GROUND_TRUTH
    if ds.stats is not None:
        flags |= FLAG_STANDARDIZED
    parts = [
        SCLD_MAGIC,
        struct.pack("<IQQII", SCLD_VERSION, ds.n, ds.t, ds.n_classes, flags),
        np.ascontiguousarray(ds.traces, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<u2").tobytes(),
        struct.pack("<I", len(ds.aux)),
    ]
    for name in sorted(ds.aux):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(np.ascontiguousarray(ds.aux[name], dtype="<u2").tobytes())
    gt = ds.ground_truth if ds.ground_truth is not None else np.zeros(0, dtype=np.int64)
    parts.append(struct.pack("<I", gt.size))
    parts.append(np.ascontiguousarray(gt, dtype="<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def dataset_from_bytes(data: bytes) -> TraceDataset:
    if len(data) < 36 or data[:4] != SCLD_MAGIC:
        raise FormatError("not an SCLD dataset file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("dataset CRC32 mismatch")
    version, n, t, n_classes, flags = struct.unpack_from("<IQQII", body, 4)
    if version != SCLD_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 4 + struct.calcsize("<IQQII")
    traces = np.frombuffer(body, dtype="<f4", count=n * t, offset=off).reshape(n, t).astype(np.float64)
    off += 4 * n * t
    labels = np.frombuffer(body, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    (n_aux,) = struct.unpack_from("<I", body, off)
    off += 4
    aux = {}
    for _ in range(n_aux):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode("utf-8")
        off += ln
        aux[name] = np.frombuffer(body, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
    (n_gt,) = struct.unpack_from("<I", body, off)
    off += 4
    gt = np.frombuffer(body, dtype="<u4", count=n_gt, offset=off).astype(np.int64)
    off += 4 * n_gt
    if off != len(body):
        raise FormatError("trailing bytes in dataset file")
    return TraceDataset(
        traces, labels, int(n_classes), aux,
        ground_truth=gt if flags & FLAG_GROUND_TRUTH else None,
    )


def save_dataset(ds: TraceDataset, path: str | Path) -> int:
    """Write an SCLD file and return its CRC32."""
    data = dataset_to_bytes(ds)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def load_dataset(path: str | Path) -> TraceDataset:
    return dataset_from_bytes(Path(path).read_bytes())
