"""Multivariate series: synthetic generation, CSV I/O, standardization, windowing."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ANOMALY_KINDS = ("spike", "level_shift", "contextual")
# event length ranges in timesteps
_EVENT_LENGTHS = {"spike": (1, 5), "level_shift": (20, 50), "contextual": (10, 30)}
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data (bad CSV, ragged rows, invalid labels)."""


@dataclass
class Series:
    values: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    # injected (kind, start, stop) intervals, synthetic data only
    events: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series values must be a (length, dims) matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series values must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (len(self.values),):
                raise DataError(f"labels length {self.labels.shape} != series length {len(self.values)}")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass
class Window:
    """One detector input: ``values`` is (w_len, m).

    ``target`` is the reference the loss compares against.  ``None`` means the
    window is its own reference (reconstruction: the values; forecast: the last
    row), so the loss follows the values when they are perturbed.
    """

    values: np.ndarray
    origin_index: int = 0
    target: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2 or self.values.shape[1] < 1:
            raise DataError(f"window must be (w_len >= 2, m >= 1), got {self.values.shape}")


@dataclass
class SyntheticConfig:
    m: int = 30
    train_len: int = 8000
    test_len: int = 10000
    anomaly_rate: float = 0.011
    base_freq_range: tuple[int, int] = (40, 50)
    noise_std: float = 0.2
    anomaly_kinds: tuple[str, ...] = ("level_shift",)
    spike_scale: float = 4.0
    level_shift_scale: tuple[float, float] = (0.5, 1.5)
    correlated_pairs: int = 0
    w_len: int = 8  # sets the minimum gap between injected events
    seed: int = 0

    def validate(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 < self.anomaly_rate < 0.5:
            raise ValueError("anomaly_rate must lie in (0, 0.5)")
        if min(self.train_len, self.test_len) < 10 * self.w_len:
            raise ValueError("train_len and test_len must be >= 10 * w_len")
        lo, hi = self.base_freq_range
        if not 2 <= lo <= hi:
            raise ValueError("base_freq_range must satisfy 2 <= lo <= hi")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        unknown = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if unknown or not self.anomaly_kinds:
            raise ValueError(f"anomaly_kinds must be a non-empty subset of {ANOMALY_KINDS}")
        if "contextual" in self.anomaly_kinds and self.m < 2:
            raise ValueError("contextual anomalies need m >= 2")
        if not 0 <= self.correlated_pairs <= self.m // 2:
            raise ValueError("correlated_pairs must be in [0, m // 2]")


def _sinusoids(t: np.ndarray, freqs: np.ndarray, phases: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * np.pi * (t[:, None] - phases[None, :]) / freqs[None, :])


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Series, Series]:
    """Noisy sinusoids per dimension; anomalies are injected into test only."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.base_freq_range
    freqs = rng.integers(lo, hi + 1, size=cfg.m).astype(np.float64)
    phases = rng.uniform(0.0, freqs)
    pairs = rng.permutation(cfg.m)[: 2 * cfg.correlated_pairs].reshape(-1, 2)
    for a, b in pairs:
        freqs[b] = freqs[a]
        phases[b] = phases[a] + rng.uniform(-1.0, 1.0)

    t_train = np.arange(cfg.train_len, dtype=np.float64)
    t_test = np.arange(cfg.train_len, cfg.train_len + cfg.test_len, dtype=np.float64)
    train = _sinusoids(t_train, freqs, phases) + rng.normal(0.0, cfg.noise_std, (cfg.train_len, cfg.m))
    test = _sinusoids(t_test, freqs, phases) + rng.normal(0.0, cfg.noise_std, (cfg.test_len, cfg.m))
    labels = np.zeros(cfg.test_len, dtype=np.int8)
    events = _inject(test, labels, train.std(axis=0), cfg, rng)
    return (
        Series(train, np.zeros(cfg.train_len, dtype=np.int8), name="synthetic-train"),
        Series(test, labels, name="synthetic-test", events=events),
    )


def _inject(values, labels, dim_std, cfg: SyntheticConfig, rng) -> list[tuple[str, int, int]]:
    length, m = values.shape
    target = int(round(cfg.anomaly_rate * length))
    gap = 2 * cfg.w_len
    kinds = sorted(cfg.anomaly_kinds)
    events: list[tuple[str, int, int]] = []
    taken = np.zeros(length, dtype=bool)
    attempts = 0
    while True:
        remaining = target - int(labels.sum())
        if remaining <= 0 or attempts > 10_000:
            break
        attempts += 1
        kind = kinds[rng.integers(len(kinds))]
        lo, hi = _EVENT_LENGTHS[kind]
        # the last event is cut short so the labelled fraction hits the target
        n = min(int(rng.integers(lo, hi + 1)), remaining)
        if length - gap - n <= gap:
            continue
        start = int(rng.integers(gap, length - gap - n))
        if taken[max(0, start - gap) : start + n + gap].any():
            continue
        stop = start + n
        if kind == "spike":
            dims = rng.choice(m, size=int(rng.integers(1, max(1, m // 5) + 1)), replace=False)
            signs = rng.choice((-1.0, 1.0), size=dims.size)
            values[start:stop, dims] += cfg.spike_scale * dim_std[dims] * signs
        elif kind == "level_shift":
            dims = rng.choice(m, size=int(rng.integers(1, max(1, m // 3) + 1)), replace=False)
            scale = rng.uniform(*cfg.level_shift_scale)
            signs = rng.choice((-1.0, 1.0), size=dims.size)
            values[start:stop, dims] += scale * dim_std[dims] * signs
        else:
            a, b = rng.choice(m, size=2, replace=False)
            values[start:stop, [a, b]] = values[start:stop, [b, a]]
        labels[start:stop] = 1
        taken[start:stop] = True
        events.append((kind, start, stop))
    events.sort(key=lambda e: e[1])
    return events


# --------------------------------------------------------------- standardizing


@dataclass
class StandardScaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "StandardScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, m: int) -> "StandardScaler":
        return cls(np.zeros(m), np.ones(m))


def fit_scaler(train: Series) -> StandardScaler:
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty series")
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0), STD_FLOOR)
    return StandardScaler(mean, std)


def apply_scaler(scaler: StandardScaler, series: Series) -> Series:
    return replace(series, values=scaler.transform(series.values))


# ------------------------------------------------------------------ windowing


def n_windows(length: int, w_len: int, stride: int) -> int:
    return (length - w_len) // stride + 1


def window_stack(values: np.ndarray, w_len: int, stride: int = 1) -> np.ndarray:
    """Read-only ``(n_windows, w_len, m)`` view of ``values``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(values) < w_len:
        raise DataError(f"series of length {len(values)} is shorter than w_len={w_len}")
    return sliding_window_view(values, w_len, axis=0)[::stride].transpose(0, 2, 1)


def windowize(series: Series, w_len: int, stride: int = 1) -> list[Window]:
    if w_len < 2:
        raise ValueError("w_len must be >= 2")
    stack = window_stack(series.values, w_len, stride)
    out = []
    for i, vals in enumerate(stack):
        origin = i * stride
        label = None if series.labels is None else int(series.labels[origin + w_len - 1])
        out.append(Window(np.array(vals), origin_index=origin, label=label))
    return out


# ------------------------------------------------------------------------ CSV


def save_csv(series: Series, path) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(series.m)]
    if series.labels is not None:
        header.append("label")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, row in enumerate(series.values):
            cells = [repr(float(v)) for v in row]
            if series.labels is not None:
                cells.append(str(int(series.labels[i])))
            writer.writerow(cells)


def load_csv(path, name: str | None = None) -> Series:
    """Read ``f0..f{m-1}[,label]`` CSV.  Errors name the 1-based file line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_label = bool(header) and header[-1] == "label"
        features = header[:-1] if has_label else header
        if not features or features != [f"f{j}" for j in range(len(features))]:
            raise DataError(f"{path}: header must be f0..f{{m-1}} with optional trailing 'label'")
        values, labels = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line} has {len(row)} cells, expected {len(header)}")
            try:
                values.append([float(c) for c in row[: len(features)]])
            except ValueError:
                raise DataError(f"{path}: line {line} has a non-numeric feature cell") from None
            if has_label:
                cell = row[-1].strip()
                if cell not in ("0", "1"):
                    raise DataError(f"{path}: line {line} label {cell!r} is not 0 or 1")
                labels.append(int(cell))
    arr = np.array(values, dtype=np.float64).reshape(-1, len(features))
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite feature value")
    return Series(arr, np.array(labels, dtype=np.int8) if has_label else None, name=name or path.stem)
