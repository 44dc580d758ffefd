"""Series ingestion, chronological splits, scaling and a regime-switch generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

TIMESTAMP_HEADERS = {"date", "datetime", "time", "timestamp", "t", "ds"}
MISSING_TOKENS = {"", "nan", "na", "n/a", "null", "none"}

ETT_RATIOS = (0.6, 0.2, 0.2)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class SeriesFrame:
    values: np.ndarray  # [T, C]
    channel_names: list[str]
    timestamps: list[str] | None = None
    freq: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise DataError(f"series values must be [T, C], got shape {self.values.shape}")
        if self.values.shape[0] < 2:
            raise DataError(f"series needs at least 2 rows, got {self.values.shape[0]}")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError(f"{len(self.channel_names)} channel names for {self.values.shape[1]} channels")
        if not np.isfinite(self.values).all():
            raise DataError("series contains non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        stamps = self.timestamps[start:stop] if self.timestamps is not None else None
        return replace(self, values=self.values[start:stop], timestamps=stamps, meta=dict(self.meta))


def interpolate_missing(column: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaNs; leading/trailing gaps take the nearest value."""
    missing = np.isnan(column)
    if not missing.any():
        return column
    if missing.all():
        raise DataError("channel has no observed values")
    idx = np.arange(column.size)
    out = column.copy()
    out[missing] = np.interp(idx[missing], idx[~missing], column[~missing])
    return out


def _parse_time(text: str) -> datetime | None:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        return None


def infer_points_per_day(timestamps: list[str] | None) -> float | None:
    if not timestamps or len(timestamps) < 2:
        return None
    parsed = [_parse_time(t) for t in timestamps[: min(len(timestamps), 1000)]]
    if any(p is None for p in parsed):
        return None
    deltas = np.diff([p.timestamp() for p in parsed])
    step = float(np.median(deltas))
    if step <= 0:
        return None
    return 86400.0 / step


def load_csv(path: str | Path) -> SeriesFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: header row but no data rows")

    has_time = header[0].strip().lower() in TIMESTAMP_HEADERS
    if not has_time:
        first = body[0][0].strip()
        has_time = _try_float(first) is None and first.lower() not in MISSING_TOKENS
    first_value_col = 1 if has_time else 0
    names = [h.strip() for h in header[first_value_col:]]
    if not names:
        raise DataError(f"{path}: no value columns")

    values = np.empty((len(body), len(names)))
    stamps = [] if has_time else None
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        if has_time:
            stamps.append(row[0].strip())
        for c, cell in enumerate(row[first_value_col:]):
            token = cell.strip()
            if token.lower() in MISSING_TOKENS:
                values[r - 2, c] = np.nan
                continue
            number = _try_float(token)
            if number is None or not math.isfinite(number):
                raise DataError(f"{path}: non-numeric cell {token!r} at row {r}, column {c + first_value_col + 1}")
            values[r - 2, c] = number

    for c in range(values.shape[1]):
        values[:, c] = interpolate_missing(values[:, c])
    ppd = infer_points_per_day(stamps)
    freq = None if ppd is None else f"{ppd:g}/day"
    return SeriesFrame(values, names, stamps, freq, {"points_per_day": ppd, "source": str(path)})


def save_csv(frame: SeriesFrame, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if frame.timestamps is not None:
            writer.writerow(["date", *frame.channel_names])
            for stamp, row in zip(frame.timestamps, frame.values):
                writer.writerow([stamp, *(repr(float(v)) for v in row)])
        else:
            writer.writerow(frame.channel_names)
            for row in frame.values:
                writer.writerow([repr(float(v)) for v in row])


def _try_float(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def split_bounds(length: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    if sum(ratios) > 1.0 + 1e-9:
        raise ConfigError(f"split ratios sum to {sum(ratios):g} > 1")
    cum = np.cumsum(ratios)
    # the tolerance keeps 0.7 + 0.1 from flooring to 7.999...
    return tuple(int(math.floor(length * c + 1e-9)) for c in cum)


def split(frame: SeriesFrame, ratios=DEFAULT_RATIOS) -> tuple[SeriesFrame, SeriesFrame, SeriesFrame]:
    a, b, c = split_bounds(frame.length, ratios)
    return frame.slice(0, a), frame.slice(a, b), frame.slice(b, c)


@dataclass
class Scaler:
    """Per-channel standardization fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        return cls(mean, np.where(std < 1e-12, 1.0, std))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


# --------------------------------------------------------------------------- synthetic


@dataclass
class RegimeSpec:
    """Block schedule for :func:`make_regime_synthetic`.

    The series alternates a calm block (``calm_len`` steps of a small
    sinusoid with light noise) and a burst block (``burst_len`` steps with a
    larger amplitude and heavier noise), starting with calm at t=0. Setting
    ``burst_len=0`` yields a calm-only series.
    """

    calm_len: int = 80
    burst_len: int = 48
    period: float = 16.0
    calm_amp: float = 0.3
    burst_amp: float = 1.5
    calm_noise: float = 0.02
    burst_noise: float = 0.2
    channels: int = 1

    @property
    def cycle(self) -> int:
        return self.calm_len + self.burst_len


def regime_labels(length: int, spec: RegimeSpec) -> np.ndarray:
    """0 for calm steps, 1 for burst steps."""
    pos = np.arange(length) % spec.cycle
    return (pos >= spec.calm_len).astype(np.int64)


def make_regime_synthetic(seed: int, length: int = 2048, spec: RegimeSpec | None = None) -> SeriesFrame:
    spec = spec or RegimeSpec()
    if length < 512:
        raise ConfigError(f"synthetic series needs length >= 512, got {length}")
    if spec.calm_len < 1 or spec.burst_len < 0:
        raise ConfigError("calm_len must be >= 1 and burst_len >= 0")
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    labels = regime_labels(length, spec)
    amp = np.where(labels == 1, spec.burst_amp, spec.calm_amp)
    noise_scale = np.where(labels == 1, spec.burst_noise, spec.calm_noise)
    columns = []
    for _ in range(spec.channels):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        clean = amp * np.sin(2.0 * np.pi * t / spec.period + phase)
        columns.append(clean + noise_scale * rng.standard_normal(length))
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    meta = {"regime": labels, "boundaries": boundaries, "seed": seed, "spec": spec, "points_per_day": None}
    return SeriesFrame(np.stack(columns, axis=1), [f"x{i}" for i in range(spec.channels)], None, None, meta)
