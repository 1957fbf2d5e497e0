"""Dataset ingestion, normalization, and sliding-window construction.

A window pairs a variable-length context (the full previous week plus the
current week's prefix) with the next ``horizon`` observations.  All
normalization statistics come from the training split only and are
exportable for audit.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .validation import check_finite

ROLES = ("timestamp", "load", "continuous", "categorical")
WEEK = pd.Timedelta(days=7)


class DataError(ValueError):
    """Malformed input data or schema; CLI maps this to exit code 2."""


def parse_schema(text, source="<schema>"):
    """column -> role mapping from a flat key=value document."""
    from .config import parse_kv_text
    mapping = parse_kv_text(text, source=source)
    for col, role in mapping.items():
        if role not in ROLES:
            raise DataError(f"{source}: column {col!r} has unknown role {role!r}")
    ts_cols = [c for c, r in mapping.items() if r == "timestamp"]
    load_cols = [c for c, r in mapping.items() if r == "load"]
    if len(ts_cols) != 1:
        raise DataError(f"{source}: need exactly one timestamp column, got {ts_cols}")
    if not load_cols:
        raise DataError(f"{source}: need at least one load column")
    return mapping


@dataclass
class TimeSeriesDataset:
    timestamps: pd.DatetimeIndex
    loads: np.ndarray                 # (N, n_series)
    externals: np.ndarray             # (N, n_externals)
    load_names: list
    external_names: list
    external_kinds: list              # "continuous" | "categorical" per column
    period: pd.Timedelta
    fill_counts: dict = field(default_factory=dict)
    split_bounds: tuple | None = None  # (end_train, end_val) indices

    def __len__(self):
        return len(self.timestamps)

    @property
    def n_series(self):
        return self.loads.shape[1]

    @property
    def n_externals(self):
        return self.externals.shape[1]

    @property
    def week_len(self):
        steps = WEEK / self.period
        if abs(steps - round(steps)) > 1e-9:
            raise DataError(f"period {self.period} does not divide one week")
        return int(round(steps))

    def set_splits(self, train_frac=0.7, val_frac=0.1):
        n = len(self)
        end_train = int(n * train_frac)
        end_val = int(n * (train_frac + val_frac))
        if not 0 < end_train <= end_val <= n:
            raise DataError(f"bad split fractions ({train_frac}, {val_frac}) for N={n}")
        self.split_bounds = (end_train, end_val)
        return self

    def split_of(self, index):
        if self.split_bounds is None:
            raise DataError("split boundaries not set")
        end_train, end_val = self.split_bounds
        if index < end_train:
            return "train"
        if index < end_val:
            return "val"
        return "test"


def _fill_channel(series, kind):
    """Interior gaps: linear for continuous, previous-value for categorical.
    Edge gaps fall back to nearest value.  Returns (filled, n_filled)."""
    n_missing = int(series.isna().sum())
    if n_missing == 0:
        return series, 0
    if kind == "categorical":
        filled = series.ffill().bfill()
    else:
        filled = series.interpolate(method="linear", limit_direction="both")
    return filled, n_missing


def load_csv(csv_path, schema, max_missing_frac=0.10):
    """Ingest one CSV into a TimeSeriesDataset.

    ``schema`` may be a parsed mapping or raw schema text.  Rows are
    sorted; duplicate timestamps are an error; missing timestamps on the
    inferred regular grid are filled per channel kind with counts kept.
    """
    if isinstance(schema, str):
        schema = parse_schema(schema)
    frame = pd.read_csv(csv_path)
    missing_cols = [c for c in schema if c not in frame.columns]
    if missing_cols:
        raise DataError(f"{csv_path}: schema columns missing from CSV: {missing_cols}")
    ts_col = next(c for c, r in schema.items() if r == "timestamp")
    try:
        stamps = pd.to_datetime(frame[ts_col], errors="raise")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{csv_path}: unparseable timestamp in column {ts_col!r}: {exc}")
    frame = frame.assign(**{ts_col: stamps}).sort_values(ts_col)
    dupes = frame[ts_col][frame[ts_col].duplicated()]
    if len(dupes):
        raise DataError(f"{csv_path}: duplicate timestamp {dupes.iloc[0]}")
    frame = frame.set_index(ts_col)

    if len(frame) < 3:
        period = pd.Timedelta(hours=1)
    else:
        deltas = frame.index.to_series().diff().dropna()
        period = deltas.mode().iloc[0]
    full_index = pd.date_range(frame.index[0], frame.index[-1], freq=period)
    frame = frame.reindex(full_index)

    load_names = [c for c, r in schema.items() if r == "load"]
    ext_names = [c for c, r in schema.items() if r in ("continuous", "categorical")]
    ext_kinds = [schema[c] for c in ext_names]

    fill_counts = {}
    for col in load_names + ext_names:
        kind = "continuous" if schema[col] == "load" else schema[col]
        raw = pd.to_numeric(frame[col], errors="coerce")
        frac = raw.isna().mean()
        if frac > max_missing_frac:
            raise DataError(
                f"{csv_path}: column {col!r} is {frac:.1%} missing "
                f"(limit {max_missing_frac:.0%})")
        filled, count = _fill_channel(raw, kind)
        frame[col] = filled
        fill_counts[col] = count

    loads = check_finite("loads", frame[load_names].to_numpy(dtype=np.float64))
    externals = frame[ext_names].to_numpy(dtype=np.float64) if ext_names \
        else np.zeros((len(frame), 0))
    check_finite("externals", externals)
    return TimeSeriesDataset(
        timestamps=pd.DatetimeIndex(full_index), loads=loads, externals=externals,
        load_names=load_names, external_names=ext_names, external_kinds=ext_kinds,
        period=period, fill_counts=fill_counts)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class ChannelStats:
    name: str
    kind: str                  # "continuous" | "categorical"
    center: float              # mean | min
    scale: float               # population std | (max - min)
    constant: bool = False

    def apply(self, values):
        if self.constant:
            return np.zeros_like(values)
        return (values - self.center) / self.scale

    def invert(self, values):
        if self.constant:
            return np.full_like(values, self.center)
        return values * self.scale + self.center


@dataclass
class NormStats:
    loads: list          # ChannelStats per load column
    externals: list      # ChannelStats per external column

    def to_csv(self):
        buf = io.StringIO()
        buf.write("channel,role,kind,center,scale,constant\n")
        for role, group in (("load", self.loads), ("external", self.externals)):
            for st in group:
                buf.write(f"{st.name},{role},{st.kind},{st.center!r},{st.scale!r},"
                          f"{int(st.constant)}\n")
        return buf.getvalue()

    def fingerprint(self):
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:16]

    def invert_loads(self, values):
        """Map normalized load values (..., n_series) back to physical units."""
        values = np.asarray(values, dtype=np.float64)
        out = values.copy()
        for k, st in enumerate(self.loads):
            out[..., k] = st.invert(values[..., k])
        return out


def _continuous_stats(name, train_values):
    mean = float(train_values.mean())
    std = float(train_values.std())  # population denominator
    if std == 0.0:
        return ChannelStats(name, "continuous", mean, 1.0, constant=True)
    return ChannelStats(name, "continuous", mean, std)


def _categorical_stats(name, train_values):
    lo, hi = float(train_values.min()), float(train_values.max())
    if hi == lo:
        return ChannelStats(name, "categorical", lo, 1.0, constant=True)
    return ChannelStats(name, "categorical", lo, hi - lo)


def normalize(dataset):
    """Z-score continuous channels and rescale categorical labels to [0, 1],
    all with statistics from the training split.  Returns (dataset, stats)."""
    if dataset.split_bounds is None:
        raise DataError("set_splits must run before normalize")
    end_train = dataset.split_bounds[0]
    load_stats, ext_stats = [], []
    loads = dataset.loads.copy()
    for k, name in enumerate(dataset.load_names):
        st = _continuous_stats(name, dataset.loads[:end_train, k])
        loads[:, k] = st.apply(dataset.loads[:, k])
        load_stats.append(st)
    externals = dataset.externals.copy()
    for k, name in enumerate(dataset.external_names):
        train_col = dataset.externals[:end_train, k]
        if dataset.external_kinds[k] == "categorical":
            st = _categorical_stats(name, train_col)
        else:
            st = _continuous_stats(name, train_col)
        externals[:, k] = st.apply(dataset.externals[:, k])
        ext_stats.append(st)
    out = TimeSeriesDataset(
        timestamps=dataset.timestamps, loads=loads, externals=externals,
        load_names=dataset.load_names, external_names=dataset.external_names,
        external_kinds=dataset.external_kinds, period=dataset.period,
        fill_counts=dataset.fill_counts, split_bounds=dataset.split_bounds)
    return out, NormStats(load_stats, ext_stats)


# ---------------------------------------------------------------------------
# windows and batching


@dataclass
class WindowInstance:
    """Context ending just before ``origin``; targets start at ``origin``."""

    origin: int
    context_start: int

    @property
    def context_len(self):
        return self.origin - self.context_start

    def context_loads(self, dataset):
        return dataset.loads[self.context_start:self.origin]

    def context_externals(self, dataset):
        return dataset.externals[self.context_start:self.origin]

    def target(self, dataset, horizon):
        return dataset.loads[self.origin:self.origin + horizon]


def make_windows(dataset, horizon, week_len=None):
    """All forecast origins with a full previous week of history.

    The context runs from the start of the origin's previous week up to
    (not including) the origin, so its length is week_len plus the
    origin's offset within its own week.  Origins whose targets straddle
    a split boundary are dropped.
    """
    n = len(dataset)
    week_len = dataset.week_len if week_len is None else int(week_len)
    minimum = 2 * week_len + horizon
    if n < minimum:
        raise DataError(f"dataset too short: N={n}, need at least {minimum}")
    instances = []
    for origin in range(week_len, n - horizon + 1):
        start = (origin // week_len - 1) * week_len
        if dataset.split_bounds is not None:
            splits = {dataset.split_of(j) for j in range(origin, origin + horizon)}
            if len(splits) > 1:
                continue
        instances.append(WindowInstance(origin=origin, context_start=start))
    return instances


def split_instances(instances, dataset):
    """Partition window instances by the split holding their targets."""
    out = {"train": [], "val": [], "test": []}
    for inst in instances:
        out[dataset.split_of(inst.origin)].append(inst)
    return out


def batch(instances, batch_size, seed):
    """Deterministic shuffled mini-batches of equal context length."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(instances))
    by_len = {}
    for idx in order:
        inst = instances[int(idx)]
        by_len.setdefault(inst.context_len, []).append(inst)
    batches = []
    for length in by_len:
        group = by_len[length]
        for lo in range(0, len(group), batch_size):
            batches.append(group[lo:lo + batch_size])
    return batches


def stack_batch(batch_instances, dataset, horizon):
    """(B, T, n_series) loads, (B, T, n_ext) externals, (B, K*n_series) targets."""
    loads = np.stack([inst.context_loads(dataset) for inst in batch_instances])
    ext = np.stack([inst.context_externals(dataset) for inst in batch_instances])
    targets = np.stack([inst.target(dataset, horizon).reshape(-1)
                        for inst in batch_instances])
    return loads, ext, targets
