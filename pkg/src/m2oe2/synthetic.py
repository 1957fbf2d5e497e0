"""Seeded synthetic load series for benchmarks and bundled sample data."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .config import seed_stream, STREAM_SYNTH

REGIME_SCHEMA = """\
timestamp = timestamp
load = load
day_type = categorical
season = categorical
"""

SAMPLE_SCHEMA = """\
timestamp = timestamp
load = load
temperature = continuous
day_type = categorical
season = categorical
"""


def regime_series(weeks=8, seed=0, start="2021-01-04"):
    """Hourly sinusoidal load whose amplitude and phase are functions of a
    season label (rotating every three days) and the weekday/weekend flag.

    The regime drivers enter only through the categorical channels, so a
    history-only model must infer them from the recent load shape while a
    context-driven model reads them directly.  The fast season rotation
    guarantees every label occurs many times inside any chronological
    train split.
    """
    rng = seed_stream(seed, STREAM_SYNTH)
    n = weeks * 7 * 24
    stamps = pd.date_range(start, periods=n, freq="h")
    hour = np.asarray(stamps.hour)
    day_idx = np.arange(n) // 24
    season = (day_idx // 3) % 4
    day_type = np.asarray(stamps.dayofweek >= 5).astype(int)

    amplitude = np.array([0.5, 1.0, 1.8, 2.6])[season]
    offset = np.array([0.0, 0.8, -0.6, 1.6])[season]
    # weekends flip the daily shape: peak moves from evening to morning
    phase = np.where(day_type == 1, 2.0, 14.0)
    wave = np.sin(2.0 * np.pi * (hour - phase) / 24.0)
    load = offset + amplitude * wave + 0.05 * rng.standard_normal(n)

    return pd.DataFrame({
        "timestamp": stamps,
        "load": np.round(load, 6),
        "day_type": day_type,
        "season": season,
    })


def sample_load_series(days=61, seed=7, start="2021-06-01"):
    """A plausible two-month hourly residential summer load with weather.

    Cooling demand follows temperature with a comfort threshold, on top of
    a double-peak workday profile that flattens on weekends.
    """
    rng = seed_stream(seed, STREAM_SYNTH)
    n = days * 24
    stamps = pd.date_range(start, periods=n, freq="h")
    hour = np.asarray(stamps.hour)
    day_type = np.asarray(stamps.dayofweek >= 5).astype(int)
    season = np.full(n, 2)  # summer throughout the slice

    drift = 27.0 + 3.0 * np.sin(2.0 * np.pi * np.arange(n) / (n - 1))
    daily = 6.5 * np.sin(2.0 * np.pi * (hour - 9.0) / 24.0)
    ar = np.zeros(n)
    shocks = rng.standard_normal(n)
    for i in range(1, n):
        ar[i] = 0.95 * ar[i - 1] + 0.35 * shocks[i]
    temperature = drift + daily + ar

    morning = np.exp(-0.5 * ((hour - 7.5) / 1.8) ** 2)
    evening = np.exp(-0.5 * ((hour - 19.5) / 2.6) ** 2)
    profile = 0.9 + 0.7 * morning + 1.3 * evening
    weekend_shape = 1.1 + 0.9 * np.exp(-0.5 * ((hour - 13.0) / 4.0) ** 2)
    base = np.where(day_type == 1, weekend_shape, profile)
    cooling = 0.16 * np.maximum(temperature - 24.0, 0.0) ** 1.4
    load = 1.2 * base + cooling + 0.12 * rng.standard_normal(n)
    load = np.maximum(load, 0.05)

    return pd.DataFrame({
        "timestamp": stamps,
        "load": np.round(load, 6),
        "temperature": np.round(temperature, 6),
        "day_type": day_type,
        "season": season,
    })


def write_dataset(frame, csv_path, schema_text, schema_path):
    frame.to_csv(csv_path, index=False)
    with open(schema_path, "w") as fh:
        fh.write(schema_text)
