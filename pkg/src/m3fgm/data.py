"""Sensor traces: CSV I/O, standardization, chronological splits, windows,
and a seeded synthetic generator with planted cluster structure."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import NamedTuple

import numpy as np

from .client import WindowBatch
from .errors import ConfigError


def _parse_time(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        return datetime.fromisoformat(raw).timestamp()


@dataclass
class TraceTable:
    timestamps: list[str]
    values: np.ndarray  # (T_total, N)
    sensor_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError(f"trace values must be (time, sensors) with N >= 1, got {self.values.shape}")
        if len(self.timestamps) != self.values.shape[0] or len(self.sensor_ids) != self.values.shape[1]:
            raise ValueError("trace table dimensions disagree with timestamps/sensor ids")

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


def load_traces(path) -> TraceTable:
    """Parse a ``timestamp,<sensor_id>...`` CSV; column order fixes client order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "timestamp" or len(header) < 2:
            raise ConfigError(f"{path}:1: header must be 'timestamp,<sensor_id>,...'")
        ids = [h.strip() for h in header[1:]]
        stamps: list[str] = []
        rows: list[list[float]] = []
        prev = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = _parse_time(row[0].strip())
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: unparseable timestamp {row[0]!r}") from None
            if t <= prev:
                raise ConfigError(f"{path}:{lineno}: timestamps must be strictly increasing")
            prev = t
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric reading") from None
            if not all(math.isfinite(v) for v in vals):
                raise ConfigError(f"{path}:{lineno}: non-finite reading")
            stamps.append(row[0].strip())
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return TraceTable(stamps, np.array(rows), ids)


def write_traces(path, table: TraceTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *table.sensor_ids])
        for stamp, row in zip(table.timestamps, table.values):
            w.writerow([stamp, *(repr(float(v)) for v in row)])


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: np.ndarray, per_sensor: bool = False) -> "Standardizer":
        """Fit on the training slice only (shape ``(time, sensors)``)."""
        train = np.asarray(train, dtype=np.float64)
        if train.size == 0:
            raise ConfigError("cannot fit a standardizer on an empty training split")
        if per_sensor:
            mu, sd = train.mean(axis=0), train.std(axis=0)
        else:
            mu, sd = np.array(train.mean()), np.array(train.std())
        if np.any(sd <= 0):
            raise ConfigError("training data has zero variance; synthetic data needs noise")
        return cls(mu, sd)

    def transform(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean

    @property
    def scale(self) -> float:
        """The single global scale; only defined for dataset-level fitting."""
        if self.std.ndim:
            raise ValueError("per-sensor standardizer has no single scale")
        return float(self.std)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {self}")

    def ranges(self, length: int) -> dict[str, tuple[int, int]]:
        """Chronological half-open index ranges: train, then validation, then test."""
        b1 = int(math.floor(length * self.train + 1e-9))
        b2 = int(math.floor(length * (self.train + self.val) + 1e-9))
        return {"train": (0, b1), "val": (b1, b2), "test": (b2, length)}


@dataclass
class SplitWindows:
    """Windows of one split for all clients, aligned in time."""

    x: np.ndarray  # (N, W, S, D)
    y: np.ndarray  # (N, W, T, D)
    t: np.ndarray  # (W,) index of each window's last history step

    @property
    def n_clients(self) -> int:
        return self.x.shape[0]

    def __len__(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> int:
        return self.y.shape[2]

    def client(self, i: int) -> WindowBatch:
        return WindowBatch(self.x[i], self.y[i], i, self.t)

    def subset(self, idx) -> "SplitWindows":
        return SplitWindows(self.x[:, idx], self.y[:, idx], self.t[idx])


def window_count(length: int, s: int, horizon: int) -> int:
    return max(0, length - s - horizon + 1)


def make_windows(values: np.ndarray, s: int, horizon: int, split: SplitSpec | None = None,
                 splits=("train", "val", "test")) -> dict[str, SplitWindows]:
    """Stride-1 windows kept only when history and target sit inside one split."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    if s < 1 or horizon < 1:
        raise ConfigError("history and horizon must be >= 1")
    split = split or SplitSpec()
    out = {}
    for name, (a, b) in split.ranges(values.shape[0]).items():
        if name not in splits:
            continue
        if b - a < s + horizon:
            raise ConfigError(f"{name} split has {b - a} steps, needs at least {s + horizon}")
        starts = np.arange(a, b - s - horizon + 1)
        hist = starts[:, None] + np.arange(s)[None, :]
        fut = starts[:, None] + s + np.arange(horizon)[None, :]
        # (W, S, N, D) -> (N, W, S, D)
        x = np.transpose(values[hist], (2, 0, 1, 3))
        y = np.transpose(values[fut], (2, 0, 1, 3))
        out[name] = SplitWindows(np.ascontiguousarray(x), np.ascontiguousarray(y), starts + s - 1)
    return out


class SyntheticDataset(NamedTuple):
    traces: TraceTable
    distances: list[tuple[str, str, float]]
    planted: np.ndarray


def synth_dataset(
    n_clients: int = 16,
    length: int = 600,
    n_clusters: int = 2,
    noise: float = 0.1,
    seed: int = 0,
    max_lag: int = 2,
) -> SyntheticDataset:
    """Speed-like traces where each cluster shares a latent signal.

    The cluster signal is a sinusoid plus a smooth random component; members
    observe it shifted by a per-client lag of 0..``max_lag`` steps, so
    low-lag members lead the others. Sensors of one cluster sit close
    together on a line and clusters are far apart.
    """
    if n_clients < 2:
        raise ConfigError("synthetic data needs at least 2 clients")
    if not 1 <= n_clusters <= n_clients:
        raise ConfigError(f"cluster count must lie in [1, {n_clients}]")
    rng = np.random.default_rng(seed)
    planted = np.arange(n_clients) * n_clusters // n_clients
    pad = max_lag + 64
    total = length + pad
    tgrid = np.arange(total)
    kernel = np.exp(-0.5 * (np.arange(-18, 19) / 6.0) ** 2)
    base = np.empty((n_clusters, total))
    for c in range(n_clusters):
        period = 32.0 + 12.0 * c
        phase = rng.uniform(0, 2 * np.pi)
        smooth = np.convolve(rng.normal(size=total + kernel.size - 1), kernel, mode="valid")
        smooth /= smooth.std()
        base[c] = np.sin(2 * np.pi * tgrid / period + phase) + smooth

    values = np.empty((length, n_clients))
    positions = np.empty(n_clients)
    for c in range(n_clusters):
        members = np.flatnonzero(planted == c)
        lags = np.round(np.linspace(0, max_lag, members.size)).astype(int)
        for i, lag in zip(members, lags):
            values[:, i] = base[c, pad - lag: pad - lag + length]
            positions[i] = 100.0 * c + 1.0 * lag + rng.uniform(0.0, 0.5)
    values = 55.0 + 8.0 * (values + noise * rng.normal(size=values.shape))

    ids = [f"s{i:03d}" for i in range(n_clients)]
    start = datetime(2012, 3, 1)
    stamps = [(start + timedelta(minutes=5 * k)).isoformat(sep=" ") for k in range(length)]
    dist = [(ids[i], ids[j], float(abs(positions[i] - positions[j])))
            for i in range(n_clients) for j in range(n_clients) if i != j]
    return SyntheticDataset(TraceTable(stamps, values, ids), dist, planted)
