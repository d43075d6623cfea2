"""Stock panel data model: ingestion, labels, day slicing, temporal splits.

A panel is a dense (stock, day) grid of prices and feature vectors with
missing observations held as NaN, never silent zeros. Day identifiers are
opaque strings ordered lexicographically (ISO dates recommended). Labels
follow the two-day-forward return convention: the label of day t is the
relative price move from t+1 to t+2, so execution happens at t+1 prices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PanelError(ValueError):
    """Malformed input data (bad rows, duplicate keys, bad prices)."""


class ConfigError(ValueError):
    """Invalid split or schema configuration."""


class InsufficientHistoryError(ValueError):
    """Requested day has fewer prior days than the window needs."""


@dataclass
class StockPanel:
    """Dense feature/price panel indexed by (stock, day).

    features: [n_stocks, n_days, n_features], prices: [n_stocks, n_days];
    NaN marks a missing observation. membership optionally tags each
    (stock, day) cell with a benchmark-subset label for per-subset reports.
    """

    stocks: list[str]
    days: list[str]
    features: np.ndarray
    prices: np.ndarray
    membership: np.ndarray | None = None

    def __post_init__(self):
        n, d = len(self.stocks), len(self.days)
        if self.features.shape[:2] != (n, d) or self.prices.shape != (n, d):
            raise PanelError(
                f"index mismatch: {n} stocks x {d} days vs features {self.features.shape},"
                f" prices {self.prices.shape}"
            )
        if any(a >= b for a, b in zip(self.days, self.days[1:])):
            raise PanelError("days must be strictly increasing")

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    def observed(self) -> np.ndarray:
        """Boolean [n_stocks, n_days]: price and full feature vector present."""
        return ~(np.isnan(self.prices) | np.isnan(self.features).any(axis=2))

    def day_index(self, day: str) -> int:
        try:
            return self.days.index(day)
        except ValueError:
            raise KeyError(f"day {day!r} not in panel") from None


@dataclass
class DayBatch:
    """One cross-section: complete feature windows plus labels for day t."""

    day: str
    windows: np.ndarray  # [N_t, T, D]
    labels: np.ndarray  # [N_t]
    stock_ids: list[str]

    def __post_init__(self):
        if self.windows.shape[0] != len(self.stock_ids) or self.labels.shape != (len(self.stock_ids),):
            raise PanelError("DayBatch row count mismatch")
        if not np.all(np.isfinite(self.labels)):
            raise PanelError(f"non-finite label in batch for day {self.day}")

    @property
    def n_stocks(self) -> int:
        return len(self.stock_ids)


@dataclass
class SplitSpec:
    """Half-open [start, end) day-identifier intervals, train < val < test."""

    train: tuple[str, str]
    validation: tuple[str, str]
    test: tuple[str, str]

    def validate(self) -> list[str]:
        problems = []
        for name, (lo, hi) in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            if lo >= hi:
                problems.append(f"split.{name}: empty or inverted interval [{lo}, {hi})")
        if self.train[1] > self.validation[0]:
            problems.append("split: train overlaps or follows validation")
        if self.validation[1] > self.test[0]:
            problems.append("split: validation overlaps or follows test")
        return problems


@dataclass
class NormStats:
    """Per-feature z-score statistics, fitted on the train interval only."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_label(prices: np.ndarray, t: int) -> float | None:
    """Two-day-forward return (p[t+2] - p[t+1]) / p[t+1] for one stock.

    Returns None when a forward price is missing (the stock is dropped
    from that day's batch); a non-positive p[t+1] is a data error.
    """
    if t + 2 >= prices.shape[0]:
        return None
    p1, p2 = prices[t + 1], prices[t + 2]
    if math.isnan(p1) or math.isnan(p2):
        return None
    if p1 <= 0:
        raise PanelError(f"non-positive price {p1} at label base index {t + 1}")
    return (p2 - p1) / p1


def slice_day(panel: StockPanel, day: str, window: int) -> DayBatch:
    """Cross-section for one day: stocks with complete windows and labels.

    The window covers the ``window`` days ending at t inclusive; t must
    have at least ``window`` prior days. Stocks are ordered by identifier.
    """
    t = panel.day_index(day)
    if t < window:
        raise InsufficientHistoryError(
            f"day {day!r} at index {t} has fewer than {window} prior days"
        )
    lo = t - window + 1
    obs = panel.observed()
    order = np.argsort(np.asarray(panel.stocks, dtype=object), kind="stable")
    rows, labels, ids = [], [], []
    for s in order:
        if not obs[s, lo : t + 1].all():
            continue
        y = compute_label(panel.prices[s], t)
        if y is None:
            continue
        rows.append(panel.features[s, lo : t + 1, :])
        labels.append(y)
        ids.append(panel.stocks[s])
    windows = np.stack(rows) if rows else np.empty((0, window, panel.n_features))
    return DayBatch(day=day, windows=windows, labels=np.asarray(labels, dtype=np.float64), stock_ids=ids)


def _boundary_index(days: list[str], ident: str) -> int:
    """Number of panel days strictly before ``ident``."""
    lo = 0
    for i, d in enumerate(days):
        if d < ident:
            lo = i + 1
        else:
            break
    return lo


def days_in_split(panel: StockPanel, interval: tuple[str, str], window: int) -> list[str]:
    """Eligible batch days: in [start, end), enough history, and label
    horizon t+2 not reaching past the interval's end boundary."""
    start, end = interval
    end_idx = _boundary_index(panel.days, end)
    out = []
    for t, day in enumerate(panel.days):
        if not (start <= day < end):
            continue
        if t < window:
            continue
        if t + 2 > end_idx or t + 2 >= len(panel.days):
            continue
        out.append(day)
    return out


def split(panel: StockPanel, spec: SplitSpec, window: int) -> tuple[list[DayBatch], list[DayBatch], list[DayBatch]]:
    """Slice the panel into train/validation/test DayBatch streams."""
    problems = spec.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    streams = []
    for interval in (spec.train, spec.validation, spec.test):
        batches = [slice_day(panel, d, window) for d in days_in_split(panel, interval, window)]
        streams.append([b for b in batches if b.n_stocks > 0])
    return streams[0], streams[1], streams[2]


def fit_normalization(panel: StockPanel, train_interval: tuple[str, str]) -> NormStats:
    """Per-feature mean/std over observed train-interval cells."""
    lo, hi = train_interval
    cols = [i for i, d in enumerate(panel.days) if lo <= d < hi]
    if not cols:
        raise ConfigError(f"no panel days inside train interval [{lo}, {hi})")
    block = panel.features[:, cols, :]  # [n_stocks, n_train_days, D]
    flat = block.reshape(-1, panel.n_features)
    ok = ~np.isnan(flat).any(axis=1)
    if not ok.any():
        raise ConfigError("train interval has no fully observed feature rows")
    sample = flat[ok]
    mean = sample.mean(axis=0)
    std = sample.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return NormStats(mean=mean, std=std)


def apply_normalization(panel: StockPanel, stats: NormStats) -> StockPanel:
    if stats.mean.shape[0] != panel.n_features:
        raise ConfigError(
            f"normalization is for {stats.mean.shape[0]} features, panel has {panel.n_features}"
        )
    return StockPanel(
        stocks=panel.stocks,
        days=panel.days,
        features=(panel.features - stats.mean) / stats.std,
        prices=panel.prices,
        membership=panel.membership,
    )


# -- CSV interchange ------------------------------------------------------------
#
# Long format, UTF-8, mandatory header: stock_id,day,price,f_0,...,f_{D-1}.
# Missing values are empty fields. A sidecar <name>.meta.json records the
# feature count, day range, and (optionally) normalization statistics.


def load_csv(path: str | Path) -> StockPanel:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file, header row is mandatory") from None
        if header[:3] != ["stock_id", "day", "price"]:
            raise PanelError(f"{path}: header must start with stock_id,day,price, got {header[:3]}")
        feat_cols = header[3:]
        if feat_cols != [f"f_{i}" for i in range(len(feat_cols))]:
            raise PanelError(f"{path}: feature columns must be f_0..f_{{D-1}}, got {feat_cols}")
        d_feat = len(feat_cols)

        rows: dict[tuple[str, str], tuple[float, list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + d_feat:
                raise PanelError(f"{path}:{lineno}: expected {3 + d_feat} fields, got {len(row)}")
            stock, day = row[0], row[1]
            if not stock or not day:
                raise PanelError(f"{path}:{lineno}: empty stock_id or day")
            try:
                price = float(row[2]) if row[2] != "" else math.nan
                feats = [float(v) if v != "" else math.nan for v in row[3:]]
            except ValueError as e:
                raise PanelError(f"{path}:{lineno}: {e}") from None
            key = (stock, day)
            if key in rows:
                raise PanelError(f"{path}:{lineno}: duplicate (stock, day) key {key}")
            rows[key] = (price, feats)

    stocks = sorted({k[0] for k in rows})
    days = sorted({k[1] for k in rows})
    features = np.full((len(stocks), len(days), d_feat), np.nan)
    prices = np.full((len(stocks), len(days)), np.nan)
    s_idx = {s: i for i, s in enumerate(stocks)}
    d_idx = {d: i for i, d in enumerate(days)}
    for (stock, day), (price, feats) in rows.items():
        features[s_idx[stock], d_idx[day], :] = feats
        prices[s_idx[stock], d_idx[day]] = price
    return StockPanel(stocks=stocks, days=days, features=features, prices=prices)


def save_csv(panel: StockPanel, path: str | Path, norm: NormStats | None = None) -> None:
    """Write the panel plus its sidecar metadata file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d_feat = panel.n_features
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stock_id", "day", "price"] + [f"f_{i}" for i in range(d_feat)])
        for s, stock in enumerate(panel.stocks):
            for d, day in enumerate(panel.days):
                price = panel.prices[s, d]
                feats = panel.features[s, d]
                if math.isnan(price) and np.isnan(feats).all():
                    continue  # wholly absent observation
                row = [stock, day, "" if math.isnan(price) else repr(float(price))]
                row += ["" if math.isnan(v) else repr(float(v)) for v in feats]
                writer.writerow(row)
    meta = {
        "n_features": d_feat,
        "first_day": panel.days[0],
        "last_day": panel.days[-1],
        "n_stocks": len(panel.stocks),
    }
    if norm is not None:
        meta["normalization"] = norm.to_dict()
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sidecar(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_suffix(p.suffix + ".meta.json")
