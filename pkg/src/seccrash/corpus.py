"""Raw record ingestion, 5-minute aggregation and crash-free speed baselines.

All instants are integer POSIX seconds (UTC). A corpus covers whole UTC days
starting at ``t0``; bins are addressed by a global index ``(ts - t0) // 300``.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

BIN_SECONDS = 300
BINS_PER_DAY = 288
DAY_SECONDS = 86400

STAT_NAMES = (
    "Avg_Speed",
    "Avg_Occupancy",
    "Avg_Volume",
    "Std_Speed",
    "Std_Occupancy",
    "Std_Volume",
    "Cv_Speed",
    "Cv_Volume",
    "Cv_Occupancy",
)
SEGMENT_TYPES = ("Basic", "Weaving", "Merge", "Diverge")
CONDITIONS = ("Clear", "Rain", "Other")
SPEED_LIMITS = (60, 65, 70)

ENVELOPE_MILES = 2.0
ENVELOPE_SECONDS = 2 * 3600
WEATHER_STALENESS_SECONDS = 60 * 60

TRAFFIC_COLUMNS = ("segment_id", "timestamp_utc", "speed_mph", "volume_veh_per_30s", "occupancy_pct")
CRASH_COLUMNS = ("crash_id", "segment_id", "timestamp_utc", "freeway", "direction")
WEATHER_COLUMNS = (
    "segment_id",
    "timestamp_utc",
    "temp_f",
    "humidity_pct",
    "wind_mps",
    "precip_mm",
    "visibility_mi",
    "condition",
)
GEOMETRY_COLUMNS = (
    "segment_id",
    "freeway",
    "direction",
    "order_index",
    "miles",
    "speed_limit",
    "lane_count",
    "segment_type",
)

_RFC3339 = re.compile(r"^\d{4}-\d{2}-\d{2}[Tt ]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$")


class IngestError(ValueError):
    """Unrecoverable problem in an input file."""


@dataclass(frozen=True)
class Rejection:
    source: str
    row: int
    reason: str


@dataclass(frozen=True)
class SegmentGeometry:
    segment_id: str
    freeway: str
    direction: str
    order_index: int
    miles: float
    speed_limit: int
    lane_count: int
    segment_type: str


@dataclass(frozen=True)
class TrafficObservation:
    segment_id: str
    timestamp: int
    speed: float
    volume: float
    occupancy: float


@dataclass(frozen=True)
class TrafficBin:
    segment_id: str
    bin_start: int
    avg_speed: float
    std_speed: float
    avg_occupancy: float
    std_occupancy: float
    avg_volume: float
    std_volume: float
    cv_speed: float
    cv_volume: float
    cv_occupancy: float
    sample_count: int


@dataclass(frozen=True)
class WeatherRecord:
    segment_id: str
    timestamp: int
    temperature: float
    humidity: float
    wind_speed: float
    precipitation: float
    visibility: float
    condition: str


@dataclass(frozen=True)
class CrashRecord:
    crash_id: str
    segment_id: str
    timestamp: int
    freeway: str
    direction: str


@dataclass(frozen=True)
class SpeedBaseline:
    segment_id: str
    time_of_day_bin: int
    mean_speed: float
    std_speed: float
    day_count: int


def format_ts(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> int:
    if not _RFC3339.match(text.strip()):
        raise IngestError(f"malformed timestamp {text!r}")
    return int(pd.Timestamp(text.strip()).tz_convert("UTC").timestamp())


def weekday_of(ts: int) -> int:
    """Monday = 0."""
    return int((ts // DAY_SECONDS + 3) % 7)


def hour_of(ts: int) -> int:
    return int((ts % DAY_SECONDS) // 3600)


def _parse_ts_column(values: pd.Series, source: str) -> np.ndarray:
    text = values.astype(str).str.strip()
    ok = text.str.match(_RFC3339.pattern)
    if not ok.all():
        bad = int(np.flatnonzero(~ok.to_numpy())[0])
        raise IngestError(f"{source}: malformed timestamp at row {bad}: {text.iloc[bad]!r}")
    parsed = pd.to_datetime(text, utc=True, format="ISO8601", errors="coerce")
    if parsed.isna().any():
        bad = int(np.flatnonzero(parsed.isna().to_numpy())[0])
        raise IngestError(f"{source}: malformed timestamp at row {bad}: {text.iloc[bad]!r}")
    # whole seconds only; sub-second parts are truncated
    return (parsed.astype("int64") // 10**9).to_numpy(dtype=np.int64)


def _numeric(frame: pd.DataFrame, column: str, source: str) -> np.ndarray:
    try:
        # astype parses decimal text exactly; pd.to_numeric can be off by an ulp
        return frame[column].astype(float).to_numpy()
    except (TypeError, ValueError):
        pass
    out = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(out) & frame[column].notna().to_numpy())
    if len(bad) and not str(frame[column].iloc[bad[0]]).strip().lower() == "nan":
        raise IngestError(f"{source}: non-numeric {column} at row {int(bad[0])}")
    return out


def _as_frame(rows, columns: Sequence[str], source: str) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        frame = rows.reset_index(drop=True)
    else:
        frame = pd.DataFrame(list(rows))
    if frame.empty:
        frame = pd.DataFrame({c: pd.Series(dtype=object) for c in columns})
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"{source}: missing columns {missing}")
    return frame[list(columns)]


# --------------------------------------------------------------------------
# Corridor topology
# --------------------------------------------------------------------------


class Topology:
    """Segment ordering along each (freeway, direction) corridor.

    Traffic flows toward increasing ``order_index``; the upstream neighbour of
    a segment is the one with the next lower index in the same corridor.
    """

    def __init__(self, geometry: Sequence[SegmentGeometry]):
        self.geometry = tuple(geometry)
        self.index = {g.segment_id: i for i, g in enumerate(self.geometry)}
        n = len(self.geometry)
        self.up = np.full(n, -1, dtype=np.int64)
        self.down = np.full(n, -1, dtype=np.int64)
        self.position = np.zeros(n, dtype=np.int64)
        self.corridor_of = np.zeros(n, dtype=np.int64)
        self.corridors: list[tuple[str, str]] = []
        self.members: list[np.ndarray] = []
        by_corridor: dict[tuple[str, str], list[int]] = {}
        for i, g in enumerate(self.geometry):
            by_corridor.setdefault((g.freeway, g.direction), []).append(i)
        for c, key in enumerate(sorted(by_corridor)):
            idx = sorted(by_corridor[key], key=lambda i: self.geometry[i].order_index)
            self.corridors.append(key)
            self.members.append(np.array(idx, dtype=np.int64))
            for p, i in enumerate(idx):
                self.position[i] = p
                self.corridor_of[i] = c
                if p > 0:
                    self.up[i] = idx[p - 1]
                if p + 1 < len(idx):
                    self.down[i] = idx[p + 1]
        self.miles = np.array([g.miles for g in self.geometry], dtype=float)

    def __len__(self) -> int:
        return len(self.geometry)

    def upstream_chain(self, seg: int, max_miles: float = ENVELOPE_MILES) -> list[int]:
        """Segments inside the spatial envelope, crash segment first.

        A segment at gap g is included while the cumulative length of gaps
        0..g (crash segment included) stays within ``max_miles``.
        """
        chain = [seg]
        total = self.miles[seg]
        cur = seg
        while self.up[cur] >= 0:
            nxt = int(self.up[cur])
            if total + self.miles[nxt] > max_miles + 1e-9:
                break
            total += self.miles[nxt]
            chain.append(nxt)
            cur = nxt
        return chain

    def gap(self, upstream_seg: int, downstream_seg: int) -> int:
        """Number of segments from ``upstream_seg`` to ``downstream_seg`` (same corridor)."""
        if self.corridor_of[upstream_seg] != self.corridor_of[downstream_seg]:
            raise ValueError("segments are on different corridors")
        return int(self.position[downstream_seg] - self.position[upstream_seg])

    def offset(self, seg: int, steps: int) -> int:
        """Segment ``steps`` positions downstream (negative: upstream), or -1."""
        members = self.members[self.corridor_of[seg]]
        p = int(self.position[seg]) + steps
        if 0 <= p < len(members):
            return int(members[p])
        return -1


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------


@dataclass
class BinGrid:
    """Dense (segment, bin, stat) array of 5-minute statistics; NaN = no data."""

    t0: int
    values: np.ndarray  # (S, T, 9) in STAT_NAMES order
    count: np.ndarray  # (S, T)

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def bin_of(self, ts: int) -> int:
        return int((ts - self.t0) // BIN_SECONDS)

    def bin_start(self, b: int) -> int:
        return self.t0 + int(b) * BIN_SECONDS

    def present(self, seg: int, b: int) -> bool:
        return 0 <= b < self.n_bins and self.count[seg, b] > 0

    def speed(self) -> np.ndarray:
        return self.values[:, :, 0]


def aggregate_observations(seg_idx, ts, speed, volume, occupancy):
    """Population statistics per (segment, 5-min bin).

    Returns ``(segments, bins, stats, counts)`` where ``bins`` are absolute
    bin numbers ``ts // 300`` and ``stats`` follows ``STAT_NAMES``. Member
    observations are summed in timestamp order, so the result does not depend
    on input order.
    """
    seg_idx = np.asarray(seg_idx, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    if len(ts) == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 9)), np.zeros(0, np.int64))
    bins = ts // BIN_SECONDS
    order = np.lexsort((ts, bins, seg_idx))
    s, b = seg_idx[order], bins[order]
    cols = [np.asarray(x, dtype=float)[order] for x in (speed, occupancy, volume)]
    change = np.ones(len(s), dtype=bool)
    change[1:] = (s[1:] != s[:-1]) | (b[1:] != b[:-1])
    starts = np.flatnonzero(change)
    counts = np.diff(np.append(starts, len(s)))
    group = np.cumsum(change) - 1
    stats = np.zeros((len(starts), 9))
    for k, x in enumerate(cols):
        mean = np.add.reduceat(x, starts) / counts
        dev = (x - mean[group]) ** 2
        std = np.sqrt(np.add.reduceat(dev, starts) / counts)
        stats[:, k] = mean
        stats[:, 3 + k] = std
    for k, (avg_col, std_col) in enumerate(((0, 3), (2, 5), (1, 4))):
        avg, std = stats[:, avg_col], stats[:, std_col]
        stats[:, 6 + k] = np.where(avg > 0, std / np.where(avg > 0, avg, 1.0), 0.0)
    return s[starts], b[starts], stats, counts


def aggregate_bins(observations: Iterable[TrafficObservation]) -> list[TrafficBin]:
    obs = list(observations)
    if not obs:
        return []
    ids = sorted({o.segment_id for o in obs})
    lookup = {sid: i for i, sid in enumerate(ids)}
    segs, bins, stats, counts = aggregate_observations(
        [lookup[o.segment_id] for o in obs],
        [o.timestamp for o in obs],
        [o.speed for o in obs],
        [o.volume for o in obs],
        [o.occupancy for o in obs],
    )
    out = []
    for s, b, row, n in zip(segs, bins, stats, counts):
        out.append(
            TrafficBin(
                segment_id=ids[s],
                bin_start=int(b) * BIN_SECONDS,
                avg_speed=row[0],
                avg_occupancy=row[1],
                avg_volume=row[2],
                std_speed=row[3],
                std_occupancy=row[4],
                std_volume=row[5],
                cv_speed=row[6],
                cv_volume=row[7],
                cv_occupancy=row[8],
                sample_count=int(n),
            )
        )
    return out


def empty_grid(n_segments: int, t0: int, n_days: int) -> BinGrid:
    T = n_days * BINS_PER_DAY
    return BinGrid(
        t0=t0,
        values=np.full((n_segments, T, 9), np.nan),
        count=np.zeros((n_segments, T), dtype=np.int32),
    )


def scatter_aggregates(grid: BinGrid, segs, bins, stats, counts) -> None:
    local = np.asarray(bins) - grid.t0 // BIN_SECONDS
    keep = (local >= 0) & (local < grid.n_bins)
    grid.values[segs[keep], local[keep]] = stats[keep]
    grid.count[segs[keep], local[keep]] = counts[keep]


# --------------------------------------------------------------------------
# Weather
# --------------------------------------------------------------------------


@dataclass
class WeatherTable:
    """Per-segment weather series sorted by time."""

    times: list[np.ndarray]  # per segment
    values: list[np.ndarray]  # per segment, (n, 5): temp, humidity, wind, precip, visibility
    conditions: list[np.ndarray]  # per segment, int codes into CONDITIONS

    def record(self, seg: int, k: int, segment_id: str) -> WeatherRecord:
        v = self.values[seg][k]
        return WeatherRecord(
            segment_id=segment_id,
            timestamp=int(self.times[seg][k]),
            temperature=float(v[0]),
            humidity=float(v[1]),
            wind_speed=float(v[2]),
            precipitation=float(v[3]),
            visibility=float(v[4]),
            condition=CONDITIONS[int(self.conditions[seg][k])],
        )

    def nearest(self, seg: int, ts: int) -> int | None:
        """Index of the record nearest in time (earlier wins ties), or None if stale."""
        times = self.times[seg]
        if len(times) == 0:
            return None
        j = int(np.searchsorted(times, ts, side="left"))
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(times):
                d = abs(int(times[k]) - ts)
                if best is None or d < best[0] or (d == best[0] and times[k] < times[best[1]]):
                    best = (d, k)
        if best is None or best[0] > WEATHER_STALENESS_SECONDS:
            return None
        return best[1]


def match_weather(segment_id: str, timestamp: int, weather_records: Sequence[WeatherRecord]) -> WeatherRecord | None:
    """Nearest-in-time record for a segment; ``None`` signals missing weather.

    Ties go to the earlier record; records more than 60 minutes away count as
    missing.
    """
    candidates = [w for w in weather_records if w.segment_id == segment_id]
    if not candidates:
        return None
    best = min(candidates, key=lambda w: (abs(w.timestamp - timestamp), w.timestamp))
    if abs(best.timestamp - timestamp) > WEATHER_STALENESS_SECONDS:
        return None
    return best


# --------------------------------------------------------------------------
# Corpus
# --------------------------------------------------------------------------


@dataclass
class Corpus:
    topology: Topology
    grid: BinGrid
    crashes: tuple[CrashRecord, ...]
    weather: WeatherTable
    n_days: int
    tables: dict[str, pd.DataFrame] = field(default_factory=dict, repr=False)
    rejections: tuple[Rejection, ...] = ()

    @property
    def geometry(self) -> tuple[SegmentGeometry, ...]:
        return self.topology.geometry

    @property
    def t0(self) -> int:
        return self.grid.t0

    @property
    def t_end(self) -> int:
        return self.grid.t0 + self.n_days * DAY_SECONDS

    def seg(self, segment_id: str) -> int:
        return self.topology.index[segment_id]

    def crash_segment(self, crash: CrashRecord) -> int:
        return self.topology.index[crash.segment_id]

    def crash_by_id(self) -> dict[str, CrashRecord]:
        return {c.crash_id: c for c in self.crashes}

    def weather_at(self, seg: int, ts: int) -> WeatherRecord | None:
        k = self.weather.nearest(seg, ts)
        if k is None:
            return None
        return self.weather.record(seg, k, self.geometry[seg].segment_id)

    def bins(self, segment_id: str | None = None) -> list[TrafficBin]:
        """Materialize TrafficBin records (optionally for one segment)."""
        segs = range(len(self.topology)) if segment_id is None else [self.seg(segment_id)]
        out = []
        for s in segs:
            sid = self.geometry[s].segment_id
            for b in np.flatnonzero(self.grid.count[s] > 0):
                row = self.grid.values[s, b]
                out.append(
                    TrafficBin(sid, self.grid.bin_start(b), row[0], row[3], row[1], row[4],
                               row[2], row[5], row[6], row[7], row[8], int(self.grid.count[s, b]))
                )
        return out

    def write_csv(self, directory) -> None:
        """Export the four input files; ``load_corpus`` on the result round-trips."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("traffic", "crashes", "weather", "geometry"):
            self.tables[name].to_csv(directory / f"{name}.csv", index=False)


def _ingest_geometry(frame: pd.DataFrame) -> list[SegmentGeometry]:
    src = "geometry.csv"
    out = []
    seen_ids: set[str] = set()
    seen_order: set[tuple[str, str, int]] = set()
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            order_index = int(row.order_index)
            miles = float(row.miles)
            speed_limit = int(float(row.speed_limit))
            lane_count = int(float(row.lane_count))
        except (TypeError, ValueError):
            raise IngestError(f"{src}: non-numeric field at row {i}") from None
        sid = str(row.segment_id)
        key = (str(row.freeway), str(row.direction), order_index)
        if sid in seen_ids:
            raise IngestError(f"{src}: duplicate segment_id {sid!r} at row {i}")
        if key in seen_order:
            raise IngestError(f"{src}: duplicate order_index {order_index} in {key[0]} {key[1]} at row {i}")
        if not miles > 0:
            raise IngestError(f"{src}: miles must be positive at row {i}")
        if speed_limit not in SPEED_LIMITS:
            raise IngestError(f"{src}: speed_limit {speed_limit} not in {SPEED_LIMITS} at row {i}")
        if not 2 <= lane_count <= 6:
            raise IngestError(f"{src}: lane_count {lane_count} outside [2, 6] at row {i}")
        if str(row.segment_type) not in SEGMENT_TYPES:
            raise IngestError(f"{src}: unknown segment_type {row.segment_type!r} at row {i}")
        seen_ids.add(sid)
        seen_order.add(key)
        out.append(SegmentGeometry(sid, key[0], key[1], order_index, miles, speed_limit, lane_count, str(row.segment_type)))
    if not out:
        raise IngestError(f"{src}: no segments")
    out.sort(key=lambda g: (g.freeway, g.direction, g.order_index))
    return out


def _segment_lookup(frame: pd.DataFrame, index: dict[str, int], src: str, strict: bool, rejections: list) -> np.ndarray:
    ids = frame["segment_id"].astype(str).to_numpy()
    seg = np.array([index.get(s, -1) for s in ids], dtype=np.int64)
    unknown = np.flatnonzero(seg < 0)
    if len(unknown):
        if strict:
            k = int(unknown[0])
            raise IngestError(f"{src}: unknown segment_id {ids[k]!r} at row {k}")
        for k in unknown:
            rejections.append(Rejection(src, int(k), f"unknown segment_id {ids[k]!r}"))
    return seg


def ingest(traffic_rows, crash_rows, weather_rows, geometry_rows) -> Corpus:
    """Validate the four record sets and build a corpus.

    Structural problems (malformed timestamps, unknown segments in traffic or
    crash rows, duplicate observations, bad geometry) raise ``IngestError``.
    Rows that merely violate a value range are dropped and listed in
    ``Corpus.rejections``.
    """
    rejections: list[Rejection] = []
    geo_frame = _as_frame(geometry_rows, GEOMETRY_COLUMNS, "geometry.csv")
    topology = Topology(_ingest_geometry(geo_frame))

    # traffic
    src = "traffic.csv"
    tf = _as_frame(traffic_rows, TRAFFIC_COLUMNS, src)
    t_ts = _parse_ts_column(tf["timestamp_utc"], src)
    t_seg = _segment_lookup(tf, topology.index, src, True, rejections)
    speed = _numeric(tf, "speed_mph", src)
    volume = _numeric(tf, "volume_veh_per_30s", src)
    occ = _numeric(tf, "occupancy_pct", src)
    key = pd.DataFrame({"s": t_seg, "t": t_ts})
    dup = key.duplicated()
    if dup.any():
        k = int(np.flatnonzero(dup.to_numpy())[0])
        raise IngestError(f"{src}: duplicate observation for segment {tf['segment_id'].iloc[k]!r} at row {k}")
    bad = ~np.isfinite(speed) | (speed < 0) | ~np.isfinite(volume) | (volume < 0) | ~(occ >= 0) | ~(occ <= 100)
    for k in np.flatnonzero(bad):
        if not np.isfinite(speed[k]) or speed[k] < 0:
            reason = f"speed {speed[k]} out of range"
        elif not np.isfinite(volume[k]) or volume[k] < 0:
            reason = f"volume {volume[k]} out of range"
        else:
            reason = f"occupancy {occ[k]} outside [0, 100]"
        rejections.append(Rejection(src, int(k), reason))
    keep = ~bad

    # crashes
    src = "crashes.csv"
    cf = _as_frame(crash_rows, CRASH_COLUMNS, src)
    c_ts = _parse_ts_column(cf["timestamp_utc"], src)
    c_seg = _segment_lookup(cf, topology.index, src, True, rejections)
    if cf["crash_id"].astype(str).duplicated().any():
        k = int(np.flatnonzero(cf["crash_id"].astype(str).duplicated().to_numpy())[0])
        raise IngestError(f"{src}: duplicate crash_id at row {k}")

    # corpus range from traffic observations (fall back to crashes)
    stamps = t_ts[keep] if keep.any() else c_ts
    if len(stamps) == 0:
        raise IngestError("no traffic observations and no crashes")
    t0 = int(stamps.min() // DAY_SECONDS * DAY_SECONDS)
    n_days = int(stamps.max() // DAY_SECONDS * DAY_SECONDS - t0) // DAY_SECONDS + 1

    crashes = []
    for k in range(len(cf)):
        g = topology.geometry[c_seg[k]]
        if not t0 <= c_ts[k] < t0 + n_days * DAY_SECONDS:
            rejections.append(Rejection(src, k, "timestamp outside corpus range"))
            continue
        if (str(cf["freeway"].iloc[k]), str(cf["direction"].iloc[k])) != (g.freeway, g.direction):
            rejections.append(Rejection(src, k, "freeway/direction disagree with geometry"))
            continue
        crashes.append(CrashRecord(str(cf["crash_id"].iloc[k]), g.segment_id, int(c_ts[k]), g.freeway, g.direction))
    crashes.sort(key=lambda c: (c.timestamp, c.crash_id))

    # weather
    src = "weather.csv"
    wf = _as_frame(weather_rows, WEATHER_COLUMNS, src)
    w_ts = _parse_ts_column(wf["timestamp_utc"], src)
    w_seg = _segment_lookup(wf, topology.index, src, False, rejections)
    w_vals = np.column_stack(
        [_numeric(wf, c, src) for c in ("temp_f", "humidity_pct", "wind_mps", "precip_mm", "visibility_mi")]
    ) if len(wf) else np.zeros((0, 5))
    cond_text = wf["condition"].astype(str).to_numpy()
    cond = np.array([CONDITIONS.index(c) if c in CONDITIONS else -1 for c in cond_text], dtype=np.int64)
    w_ok = w_seg >= 0
    for k in np.flatnonzero(w_ok):
        v = w_vals[k]
        reason = None
        if not np.all(np.isfinite(v)):
            reason = "non-finite weather value"
        elif not 0 <= v[1] <= 100:
            reason = f"humidity {v[1]} outside [0, 100]"
        elif v[4] < 0:
            reason = f"visibility {v[4]} negative"
        elif cond[k] < 0:
            reason = f"unknown condition {cond_text[k]!r}"
        if reason:
            rejections.append(Rejection(src, int(k), reason))
            w_ok[k] = False
    times, values, conds = [], [], []
    for s in range(len(topology)):
        rows = np.flatnonzero(w_ok & (w_seg == s))
        rows = rows[np.lexsort((rows, w_ts[rows]))]
        times.append(w_ts[rows])
        values.append(w_vals[rows])
        conds.append(cond[rows])
    weather = WeatherTable(times, values, conds)

    grid = empty_grid(len(topology), t0, n_days)
    scatter_aggregates(grid, *aggregate_observations(t_seg[keep], t_ts[keep], speed[keep], volume[keep], occ[keep]))

    if rejections:
        log.warning("ingest rejected %d rows", len(rejections))
    tables = {
        "traffic": tf.loc[keep].reset_index(drop=True),
        "crashes": cf,
        "weather": wf.loc[w_ok].reset_index(drop=True),
        "geometry": geo_frame,
    }
    return Corpus(topology, grid, tuple(crashes), weather, n_days, tables, tuple(rejections))


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    frames = {}
    for name in ("traffic", "crashes", "weather", "geometry"):
        path = directory / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing input file {path}")
        frames[name] = pd.read_csv(path, dtype=str, keep_default_na=False)
    return ingest(frames["traffic"], frames["crashes"], frames["weather"], frames["geometry"])


# --------------------------------------------------------------------------
# Crash-free baselines
# --------------------------------------------------------------------------


@dataclass
class BaselineTable:
    """Per (segment, time-of-day slot) crash-free statistics."""

    segment_ids: tuple[str, ...]
    mean_speed: np.ndarray  # (S, 288), NaN where absent
    std_speed: np.ndarray
    day_count: np.ndarray
    mean_occupancy: np.ndarray
    mean_volume: np.ndarray
    missing_segments: tuple[str, ...] = ()

    @property
    def low_confidence(self) -> np.ndarray:
        return (self.day_count > 0) & (self.day_count < 3)

    def has(self, seg: int, slot: int) -> bool:
        return self.day_count[seg, slot] > 0

    def records(self) -> list[SpeedBaseline]:
        out = []
        for s, sid in enumerate(self.segment_ids):
            for slot in np.flatnonzero(self.day_count[s] > 0):
                out.append(SpeedBaseline(sid, int(slot), float(self.mean_speed[s, slot]),
                                         float(self.std_speed[s, slot]), int(self.day_count[s, slot])))
        return out


def crash_calendar(corpus: Corpus) -> np.ndarray:
    """(S, days) mask of days touched by a crash whose static envelope covers the segment."""
    cal = np.zeros((len(corpus.topology), corpus.n_days), dtype=bool)
    for c in corpus.crashes:
        seg = corpus.crash_segment(c)
        first = (c.timestamp - corpus.t0) // DAY_SECONDS
        last = (c.timestamp + ENVELOPE_SECONDS - corpus.t0) // DAY_SECONDS
        for s in corpus.topology.upstream_chain(seg):
            cal[s, max(first, 0) : min(last, corpus.n_days - 1) + 1] = True
    return cal


def build_baseline(grid: BinGrid, calendar: np.ndarray, segment_ids: Sequence[str]) -> BaselineTable:
    """Mean and population std of speed per slot over crash-free days only."""
    S, T, _ = grid.values.shape
    D = T // BINS_PER_DAY
    vals = grid.values.reshape(S, D, BINS_PER_DAY, 9)
    usable = (grid.count.reshape(S, D, BINS_PER_DAY) > 0) & ~calendar[:, :, None]
    n = usable.sum(axis=1)
    safe = np.where(n > 0, n, 1)

    first = np.argmax(usable, axis=1)

    def masked_mean(x):
        # shift by the first usable day so identical days give an exact mean
        ref = np.take_along_axis(x, first[:, None, :], axis=1)[:, 0, :]
        ref = np.where(n > 0, ref, 0.0)
        return ref + np.where(usable, x - ref[:, None, :], 0.0).sum(axis=1) / safe

    mean = masked_mean(vals[..., 0])
    var = np.where(usable, (vals[..., 0] - mean[:, None, :]) ** 2, 0.0).sum(axis=1) / safe
    absent = n == 0
    mean_speed = np.where(absent, np.nan, mean)
    std_speed = np.where(absent, np.nan, np.sqrt(var))
    mean_occ = np.where(absent, np.nan, masked_mean(vals[..., 1]))
    mean_vol = np.where(absent, np.nan, masked_mean(vals[..., 2]))
    missing = tuple(segment_ids[s] for s in range(S) if not (~calendar[s]).any())
    if missing:
        log.warning("no crash-free days for %d segments: baseline absent", len(missing))
    return BaselineTable(tuple(segment_ids), mean_speed, std_speed, n.astype(np.int64), mean_occ, mean_vol, missing)


def corpus_baseline(corpus: Corpus) -> BaselineTable:
    return build_baseline(corpus.grid, crash_calendar(corpus), [g.segment_id for g in corpus.geometry])
