"""Price loading, window feature construction, and walk-forward phases.

Day indices are 0-based positions in a series. A feature window of width W
anchored at day T covers days T-W+1 .. T and is normalized by the feature's
value on day T-W, so the first prior day must exist. Labels are computed from
raw closes, never from normalized features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, IntegrityError, SchemaError, SeriesTooShortError

log = logging.getLogger(__name__)

FEATURE_COLUMNS = ("Open", "High", "Low", "Close", "Volume")
CLOSE = FEATURE_COLUMNS.index("Close")
LOW = FEATURE_COLUMNS.index("Low")
HIGH = FEATURE_COLUMNS.index("High")


@dataclass(frozen=True)
class PriceSeries:
    """One asset's daily bars. Arrays are float64 and equally long."""

    ticker: str
    name: str
    dates: tuple[date, ...]
    values: np.ndarray  # (n_days, 5) in FEATURE_COLUMNS order

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def close(self) -> np.ndarray:
        return self.values[:, CLOSE]

    @property
    def low(self) -> np.ndarray:
        return self.values[:, LOW]

    @property
    def high(self) -> np.ndarray:
        return self.values[:, HIGH]


@dataclass(frozen=True)
class PriceWindow:
    """Normalized features for one (asset, anchor day) plus per-horizon labels."""

    t: int
    date: date
    features: np.ndarray       # (W, 5)
    returns: dict[int, float]  # horizon -> (close[t+d] - close[t]) / close[t]
    directions: dict[int, int]  # horizon -> 1 if close[t+d] >= close[t]


def parse_ticker(path: str | Path) -> tuple[str, str]:
    """Split a '[TICKER]-[Name].csv' filename; no dash means name == ticker."""
    stem = Path(path).stem
    ticker, _, name = stem.partition("-")
    return ticker, name or ticker


def load_price_csv(path: str | Path, min_rows: int = 2800) -> PriceSeries:
    """Load one OHLCV file.

    Rejects files shorter than ``min_rows``, missing columns, non-positive
    prices, negative volume, and non-finite values. Unsorted rows are
    repaired by date sort with a warning; duplicate dates are an error.
    """
    try:
        frame = pd.read_csv(path)
    except Exception as exc:
        raise SchemaError(f"{path}: unreadable CSV: {exc}") from None
    frame.columns = [str(c).strip() for c in frame.columns]
    by_lower = {c.lower(): c for c in frame.columns}
    missing = [c for c in ("Date", *FEATURE_COLUMNS) if c.lower() not in by_lower]
    if missing:
        raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
    if len(frame) < min_rows:
        raise SeriesTooShortError(
            f"{path}: {len(frame)} rows < min_rows {min_rows}"
        )

    try:
        dates = pd.to_datetime(frame[by_lower["date"]]).dt.date.to_numpy()
    except Exception as exc:
        raise SchemaError(f"{path}: unparseable Date column: {exc}") from None
    values = np.column_stack(
        [pd.to_numeric(frame[by_lower[c.lower()]], errors="coerce").to_numpy(float)
         for c in FEATURE_COLUMNS]
    )

    order = np.argsort(dates, kind="stable")
    if not np.array_equal(order, np.arange(len(dates))):
        log.warning("%s: rows out of date order; repaired by sort", path)
        dates, values = dates[order], values[order]
    if len(np.unique(dates)) != len(dates):
        raise IntegrityError(f"{path}: duplicate dates")
    if not np.isfinite(values).all():
        raise IntegrityError(f"{path}: non-finite or missing values")
    if (values[:, :4] <= 0).any():
        raise IntegrityError(f"{path}: non-positive price")
    if (values[:, 4] < 0).any():
        raise IntegrityError(f"{path}: negative volume")

    ticker, name = parse_ticker(path)
    return PriceSeries(ticker=ticker, name=name, dates=tuple(dates), values=values)


def load_price_dir(
    directory: str | Path, min_rows: int = 2800
) -> list[PriceSeries]:
    """Load every CSV in a directory, skipping too-short files with a notice.

    Results are sorted by ticker; the list index is the asset id used
    everywhere downstream.
    """
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise SchemaError(f"{directory}: no CSV files found")
    out = []
    for p in paths:
        try:
            out.append(load_price_csv(p, min_rows=min_rows))
        except SeriesTooShortError as exc:
            log.warning("skipping %s: %s", p.name, exc)
    if not out:
        raise SchemaError(f"{directory}: every file was below min_rows={min_rows}")
    out.sort(key=lambda s: s.ticker)
    return out


def make_window(
    series: PriceSeries,
    t: int,
    window: int,
    deltas: Sequence[int],
    normalizer: str = "pre_window",
) -> PriceWindow:
    """Build the normalized feature window and raw-close labels at day ``t``.

    ``normalizer``: "pre_window" divides by day t-window (the default);
    "window_start" divides by the first day inside the window.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if t - window < 0:
        raise ValueError(
            f"t={t} leaves no normalizer day before a window of {window}"
        )
    horizon = max(deltas)
    if t + horizon >= series.n_days:
        raise ValueError(
            f"t={t} with max horizon {horizon} exceeds series of {series.n_days} days"
        )
    if normalizer not in ("pre_window", "window_start"):
        raise ValueError(f"unknown normalizer {normalizer!r}")

    block = series.values[t - window + 1 : t + 1]
    ref_row = t - window if normalizer == "pre_window" else t - window + 1
    ref = series.values[ref_row].copy()
    # A zero reference (possible for volume only) would blow up the division;
    # fall back to the raw column in that case.
    ref[ref == 0.0] = 1.0
    features = block / ref

    close = series.close
    returns = {int(d): float((close[t + d] - close[t]) / close[t]) for d in deltas}
    directions = {int(d): int(close[t + d] >= close[t]) for d in deltas}
    return PriceWindow(
        t=t, date=series.dates[t], features=features,
        returns=returns, directions=directions,
    )


def make_topk_labels(returns: np.ndarray, k: int) -> np.ndarray:
    """Binary top-k membership by return, ties broken toward lower index."""
    returns = np.asarray(returns, dtype=float)
    if returns.ndim != 1:
        raise ValueError("returns must be a 1-d vector")
    if not 1 <= k <= len(returns):
        raise ValueError(f"k={k} out of range for {len(returns)} assets")
    order = sorted(range(len(returns)), key=lambda i: (-returns[i], i))
    labels = np.zeros(len(returns), dtype=np.int64)
    labels[order[:k]] = 1
    return labels


@dataclass(frozen=True)
class PhaseSpec:
    """Half-open day-index ranges for one walk-forward phase."""

    index: int
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


def make_phases(
    total_days: int,
    n_phases: int,
    train: int = 450,
    val: int = 50,
    test: int = 100,
    stride: int = 100,
    first_train: int = 250,
) -> list[PhaseSpec]:
    """Sliding train/val/test splits.

    The training span starts at ``first_train`` days and grows by ``stride``
    per phase until it reaches ``train``; after that the whole window slides.
    Test spans tile [first_train + val, first_train + val + stride * n_phases)
    when test == stride.
    """
    for label, v in (("total_days", total_days), ("n_phases", n_phases),
                     ("train", train), ("val", val), ("test", test),
                     ("stride", stride), ("first_train", first_train)):
        if v < 1:
            raise ConfigError(f"{label} must be positive, got {v}")
    if first_train > train:
        raise ConfigError(f"first_train {first_train} exceeds train {train}")
    need = stride * (n_phases - 1) + first_train + val + test
    if total_days < need:
        raise ConfigError(
            f"{n_phases} phases need at least {need} days, got {total_days}"
        )
    phases = []
    for p in range(n_phases):
        test_start = first_train + val + stride * p
        train_len = min(first_train + stride * p, train)
        val_start = test_start - val
        phases.append(
            PhaseSpec(
                index=p,
                train=(val_start - train_len, val_start),
                val=(val_start, test_start),
                test=(test_start, test_start + test),
            )
        )
    return phases
