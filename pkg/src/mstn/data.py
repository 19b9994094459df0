"""Series ingestion, min-max scaling, forecasting windows, imputation masks
and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import reduce
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateError, ProtocolError
from .rng import Rng

SPLITS = ("train", "val", "test")
PAPER_MASK_RATIOS = (0.125, 0.25, 0.375, 0.5)


def chronological_split(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int]:
    """``(train_end, val_end)`` for a 70/10/20 chronological split by default."""
    # the epsilon absorbs float sums like 0.7 + 0.1 = 0.7999999999999999
    train_end = int(n * fractions[0] + 1e-9)
    val_end = int(n * (fractions[0] + fractions[1]) + 1e-9)
    return train_end, val_end


@dataclass
class MinMaxScaler:
    data_min: np.ndarray
    data_max: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, names=None) -> "MinMaxScaler":
        lo, hi = values.min(axis=0), values.max(axis=0)
        flat = np.flatnonzero(hi <= lo)
        if flat.size:
            j = int(flat[0])
            label = names[j] if names else f"column {j}"
            raise DegenerateError(f"feature {label!r} is constant on the training split; cannot min-max scale")
        return cls(lo.astype(np.float64), hi.astype(np.float64))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.data_min) / (self.data_max - self.data_min)

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * (self.data_max - self.data_min) + self.data_min


@dataclass
class TimeSeriesDataset:
    values: np.ndarray
    feature_names: list = field(default_factory=list)
    split: tuple = (0, 0)
    scaler: MinMaxScaler | None = None
    timestamps: list | None = None
    name: str = "series"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series values must be [T, D], got shape {self.values.shape}")
        bad = np.flatnonzero(~np.isfinite(self.values).all(axis=1))
        if bad.size:
            raise DataError(f"non-finite value in row {int(bad[0])}")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(self.values.shape[1])]
        if self.split == (0, 0):
            self.split = chronological_split(len(self.values))
        train_end, val_end = self.split
        if not 0 < train_end < val_end <= len(self.values):
            raise DataError(f"invalid split {self.split} for {len(self.values)} rows")

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def rows(self, split: str) -> np.ndarray:
        train_end, val_end = self.split
        bounds = {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, len(self.values))}
        if split not in bounds:
            raise ConfigError(f"unknown split {split!r}; valid: {SPLITS}")
        lo, hi = bounds[split]
        return self.values[lo:hi]


# ------------------------------------------------------------------------ CSV
def load_csv(path: str | Path, has_header: bool = True, timestamp_col: int | None = None,
             split: tuple | None = None) -> TimeSeriesDataset:
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        rows = list(reader)
    if has_header and rows:
        header, rows = rows[0], rows[1:]
    else:
        header = None
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    values, stamps = [], []
    for i, row in enumerate(rows):
        line = i + 2 if has_header else i + 1
        if len(row) != width:
            raise DataError(f"{path}: ragged row at line {line}: {len(row)} cells, expected {width}")
        parsed = []
        for j, cell in enumerate(row):
            if j == timestamp_col:
                stamps.append(cell)
                continue
            try:
                parsed.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: cannot parse cell at row {line}, column {j + 1}: {cell!r}") from None
        values.append(parsed)
    names = [h for j, h in enumerate(header) if j != timestamp_col] if header else []
    arr = np.array(values, dtype=np.float64)
    return TimeSeriesDataset(arr, names, split or chronological_split(len(arr)),
                             timestamps=stamps if timestamp_col is not None else None, name=Path(path).stem)


def save_csv(ds: TimeSeriesDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        lead = ["date"] if ds.timestamps is not None else []
        writer.writerow(lead + list(ds.feature_names))
        for i, row in enumerate(ds.values):
            stamp = [ds.timestamps[i]] if ds.timestamps is not None else []
            writer.writerow(stamp + [repr(float(v)) for v in row])


def save_mask_csv(mask: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, np.asarray(mask, dtype=int), fmt="%d", delimiter=",")


# -------------------------------------------------------------------- scaling
def fit_transform_minmax(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """Fit a per-feature min-max scaler on the training rows and rescale the whole series."""
    scaler = MinMaxScaler.fit(ds.rows("train"), ds.feature_names)
    return replace(ds, values=scaler.transform(ds.values), scaler=scaler)


# -------------------------------------------------------------------- windows
@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError(f"lookback and horizon must be >= 1, got {self.lookback}, {self.horizon}")

    def count(self, n: int) -> int:
        return max(0, n - self.lookback - self.horizon + 1)


def make_windows(ds: TimeSeriesDataset, spec: WindowSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows inside one split: ``x = rows[i:i+L]``, ``y = rows[i+L:i+L+H]``.

    Returns arrays ``X [N, L, D]`` and ``Y [N, H, D]``.
    """
    rows = ds.rows(split)
    need = spec.lookback + spec.horizon
    if len(rows) < need:
        raise ProtocolError(f"{split} split has {len(rows)} rows; lookback {spec.lookback} + horizon "
                            f"{spec.horizon} needs at least {need}")
    n = spec.count(len(rows))
    idx = np.arange(n)[:, None]
    X = rows[idx + np.arange(spec.lookback)]
    Y = rows[idx + spec.lookback + np.arange(spec.horizon)]
    return X, Y


def make_segments(ds: TimeSeriesDataset, length: int, split: str, stride: int = 1) -> np.ndarray:
    """Fixed-length sub-series ``[N, length, D]`` of one split, for imputation."""
    rows = ds.rows(split)
    if len(rows) < length:
        raise ProtocolError(f"{split} split has {len(rows)} rows; segments need {length}")
    starts = np.arange(0, len(rows) - length + 1, stride)
    return rows[starts[:, None] + np.arange(length)]


# ---------------------------------------------------------------------- masks
@dataclass(frozen=True)
class MaskSpec:
    """Random masking of ``ratio`` of a window.

    ``unit="cell"`` masks individual (t, feature) cells; ``unit="timestep"``
    masks whole rows. The count is ``round(ratio * n)`` (half up), drawn
    without replacement.
    """

    ratio: float
    seed: int = 0
    unit: str = "cell"

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ConfigError(f"mask ratio must be in (0, 1), got {self.ratio}")
        if self.unit not in ("cell", "timestep"):
            raise ConfigError(f"mask unit must be 'cell' or 'timestep', got {self.unit!r}")

    def count(self, T: int, D: int) -> int:
        n = T * D if self.unit == "cell" else T
        return int(math.floor(self.ratio * n + 0.5))


def draw_mask(shape: tuple, spec: MaskSpec, rng: Rng) -> np.ndarray:
    T, D = shape
    k = spec.count(T, D)
    if k == 0:
        raise DegenerateError(f"mask ratio {spec.ratio} masks no entries of a {T}x{D} window")
    mask = np.zeros(T * D if spec.unit == "cell" else T)
    mask[rng.choice(mask.size, k)] = 1.0
    if spec.unit == "timestep":
        return np.repeat(mask[:, None], D, axis=1)
    return mask.reshape(T, D)


def apply_mask(x: np.ndarray, spec: MaskSpec, rng: Rng | None = None):
    """Returns ``(x_masked, mask, x_true)``; masked cells are zero-filled, mask == 1 marks them."""
    x = np.asarray(x)
    mask = draw_mask(x.shape, spec, rng or Rng(spec.seed, "mask"))
    return x * (1.0 - mask), mask, x


def mask_windows(X: np.ndarray, spec: MaskSpec, rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mask every window of ``X [N, T, D]`` from one sequential stream."""
    rng = rng or Rng(spec.seed, "mask")
    masks = np.stack([draw_mask(X.shape[1:], spec, rng) for _ in range(len(X))]) if len(X) else np.zeros_like(X)
    return X * (1.0 - masks), masks


# ------------------------------------------------------------------ synthetic
def synth_sine(n_components: int, T_total: int, D: int, period_range=(8, 32), noise_sd: float = 0.0,
               seed: int = 0, amplitude: float = 1.0) -> TimeSeriesDataset:
    """Per-feature sums of ``n_components`` sinusoids with integer periods and random phases.

    Periods are drawn uniformly from the integer range ``period_range``
    (inclusive), so the noiseless series is exactly periodic with
    ``meta["period"]`` = lcm of all periods used.
    """
    if n_components < 1 or T_total < 1 or D < 1 or noise_sd < 0:
        raise ConfigError("synth_sine needs positive sizes and noise_sd >= 0")
    lo, hi = period_range
    if lo < 2 or hi < lo:
        raise ConfigError(f"bad period range {period_range}")
    rng = Rng(seed, "synth_sine")
    periods = rng.gen.integers(lo, hi + 1, size=(D, n_components))
    phases = rng.uniform(0, 2 * np.pi, (D, n_components))
    t = np.arange(T_total)[:, None, None]
    values = amplitude * np.sin(2 * np.pi * t / periods[None] + phases[None]).sum(axis=2)
    if noise_sd > 0:
        values = values + rng.normal(0.0, noise_sd, values.shape)
    period = int(reduce(math.lcm, periods.reshape(-1).tolist()))
    return TimeSeriesDataset(values, name="synth_sine",
                             meta={"periods": periods.tolist(), "period": period, "seed": seed,
                                   "noise_sd": noise_sd})


def lag_autocorrelation(x: np.ndarray, lag: int) -> float:
    """Pearson correlation between ``x[:-lag]`` and ``x[lag:]`` of a 1-D series."""
    a, b = x[:-lag], x[lag:]
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)


def synth_classes(n_per_class: int, T: int, D: int, seed: int = 0, period: int = 8) -> LabeledSet:
    """Two-class set: class 0 is a clean unit sinusoid (random phase per sample
    and feature), class 1 is unit-variance white noise. Sample order is
    shuffled with the seed.

    ``meta["autocorr"]`` holds the mean lag-``period`` autocorrelation per class.
    """
    if n_per_class < 1 or T <= period or D < 1:
        raise ConfigError("synth_classes needs n_per_class >= 1 and T > period")
    rng = Rng(seed, "synth_classes")
    t = np.arange(T)[None, :, None]
    phase = rng.uniform(0, 2 * np.pi, (n_per_class, 1, D))
    clean = np.sin(2 * np.pi * t / period + phase)
    noise = rng.normal(0.0, 1.0, (n_per_class, T, D))
    X = np.concatenate([clean, noise])
    y = np.repeat(np.arange(2), n_per_class)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    autocorr = {c: float(np.mean([lag_autocorrelation(X[i, :, j], period)
                                  for i in np.flatnonzero(y == c) for j in range(D)]))
                for c in (0, 1)}
    return LabeledSet(X, y, 2, {"period": period, "autocorr": autocorr, "seed": seed})


def stratified_split(y: np.ndarray, seed: int, fractions=(0.7, 0.1, 0.2)) -> dict[str, np.ndarray]:
    """Per-class 70/10/20 split of sample indices; raises if a class misses a split."""
    rng = Rng(seed, "stratify")
    parts: dict[str, list] = {s: [] for s in SPLITS}
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        a = int(round(len(idx) * fractions[0]))
        b = int(round(len(idx) * (fractions[0] + fractions[1])))
        for s, chunk in zip(SPLITS, (idx[:a], idx[a:b], idx[b:])):
            parts[s].extend(chunk.tolist())
    out = {s: np.sort(np.array(v, dtype=int)) for s, v in parts.items()}
    for s, idx in out.items():
        missing = set(np.unique(y).tolist()) - set(np.unique(y[idx]).tolist())
        if missing:
            raise DataError(f"stratification: class(es) {sorted(missing)} absent from the {s} split")
    return out
