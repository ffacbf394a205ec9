"""Hand-built corpora for unit tests: one observation per 5-min bin."""
from __future__ import annotations

import numpy as np
import pandas as pd

from seccrash.corpus import BINS_PER_DAY, BaselineTable, format_ts, ingest

T0 = 1_609_718_400  # 2021-01-04 00:00 UTC, a Monday


def geometry_frame(n_seg: int, miles=0.4, freeway="I-4", types=None) -> pd.DataFrame:
    miles = np.broadcast_to(np.asarray(miles, dtype=float), (n_seg,))
    return pd.DataFrame(
        {
            "segment_id": [f"S{i:02d}" for i in range(n_seg)],
            "freeway": freeway,
            "direction": "NB",
            "order_index": range(n_seg),
            "miles": miles,
            "speed_limit": 65,
            "lane_count": 3,
            "segment_type": types or ["Basic"] * n_seg,
        }
    )


def traffic_frame(speed: np.ndarray, t0: int = T0, missing=None) -> pd.DataFrame:
    """``speed`` is (segments, bins); one observation at each bin start."""
    S, T = speed.shape
    keep = np.ones((S, T), dtype=bool) if missing is None else ~missing
    seg, b = np.nonzero(keep)
    v = speed[seg, b]
    return pd.DataFrame(
        {
            "segment_id": [f"S{s:02d}" for s in seg],
            "timestamp_utc": [format_ts(t0 + 300 * int(k)) for k in b],
            "speed_mph": v,
            "volume_veh_per_30s": 10.0 + 0.1 * v,
            "occupancy_pct": np.clip(100 - v, 0, 100),
        }
    )


def crash_frame(crashes, freeway="I-4") -> pd.DataFrame:
    """``crashes`` is a list of (crash_id, segment index, timestamp)."""
    return pd.DataFrame(
        {
            "crash_id": [c[0] for c in crashes],
            "segment_id": [f"S{c[1]:02d}" for c in crashes],
            "timestamp_utc": [format_ts(c[2]) for c in crashes],
            "freeway": freeway,
            "direction": "NB",
        },
        columns=["crash_id", "segment_id", "timestamp_utc", "freeway", "direction"],
    )


def weather_frame(n_seg: int, n_days: int, t0: int = T0) -> pd.DataFrame:
    rows = []
    for s in range(n_seg):
        for h in range(24 * n_days):
            rows.append((f"S{s:02d}", format_ts(t0 + 3600 * h), 70.0, 60.0, 3.0, 0.0, 10.0, "Clear"))
    return pd.DataFrame(
        rows,
        columns=["segment_id", "timestamp_utc", "temp_f", "humidity_pct", "wind_mps", "precip_mm", "visibility_mi",
                 "condition"],
    )


def make_corpus(speed: np.ndarray, crashes=(), miles=0.4, missing=None, types=None):
    S, T = speed.shape
    n_days = -(-T // BINS_PER_DAY)
    return ingest(
        traffic_frame(speed, missing=missing),
        crash_frame(list(crashes)),
        weather_frame(S, n_days),
        geometry_frame(S, miles, types=types),
    )


def explicit_baseline(mean: np.ndarray, std: np.ndarray) -> BaselineTable:
    """Baseline table from given (segments, 288) mean and std arrays."""
    S = mean.shape[0]
    return BaselineTable(
        tuple(f"S{i:02d}" for i in range(S)),
        mean.astype(float),
        std.astype(float),
        np.full((S, BINS_PER_DAY), 5, dtype=np.int64),
        np.full((S, BINS_PER_DAY), 20.0),
        np.full((S, BINS_PER_DAY), 15.0),
    )
