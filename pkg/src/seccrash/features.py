"""Base rows, dynamic spatial-temporal window vectors and pre-crash vectors.

Names follow ``<Stat>_<window>_<position>`` for traffic statistics, e.g.
``Avg_Speed_1_up``; geometry uses ``<Geo>_<position>`` and weather carries
plain names. Window 1 is the most recent window.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .corpus import (
    BIN_SECONDS,
    BINS_PER_DAY,
    SEGMENT_TYPES,
    STAT_NAMES,
    BaselineTable,
    Corpus,
    CrashRecord,
    SegmentGeometry,
    WeatherRecord,
    corpus_baseline,
)

BASE_TRAFFIC = STAT_NAMES[:8]
WEATHER_NAMES = (
    "Temperature",
    "Humidity",
    "Wind_Speed",
    "Precipitation",
    "Visibility",
    "Condition_Clear",
    "Condition_Rain",
)
GEO_NAMES = (
    "Speed_Limit",
    "Lane_Count",
    "Segment_Basic",
    "Segment_Weaving",
    "Segment_Merge",
    "Segment_Diverge",
    "Miles",
)
ST_POSITIONS = ("up", "center", "down")
PC_POSITIONS = ("up", "crash", "down")
LEAD_SECONDS = 300
MAX_MISSING_FRACTION = 0.5

_TRAFFIC_RE = re.compile(r"^(%s)_(\d+)_(%s)$" % ("|".join(STAT_NAMES), "|".join(ST_POSITIONS + PC_POSITIONS[1:2])))
_GEO_RE = re.compile(r"^(%s)_(%s)$" % ("|".join(GEO_NAMES), "|".join(ST_POSITIONS + PC_POSITIONS[1:2])))


class ExtractionRejected(ValueError):
    """Too much of the window is missing to build a vector."""


@lru_cache(maxsize=None)
def st_feature_names(window_count: int = 4) -> tuple[str, ...]:
    traffic = [f"{s}_{w}_{p}" for w in range(1, window_count + 1) for p in ST_POSITIONS for s in STAT_NAMES]
    geo = [f"{g}_{p}" for p in ST_POSITIONS for g in GEO_NAMES]
    return tuple(traffic) + WEATHER_NAMES + tuple(geo)


@lru_cache(maxsize=None)
def pc_feature_names() -> tuple[str, ...]:
    traffic = [f"{s}_1_{p}" for p in PC_POSITIONS for s in STAT_NAMES]
    geo = [f"{g}_{p}" for p in PC_POSITIONS for g in GEO_NAMES]
    return tuple(traffic) + WEATHER_NAMES + tuple(geo)


def parse_feature_name(name: str) -> tuple[str, str, int | None, str | None]:
    """Split a feature name into ``(group, variable, window, position)``."""
    m = _TRAFFIC_RE.match(name)
    if m:
        return "traffic", m.group(1), int(m.group(2)), m.group(3)
    m = _GEO_RE.match(name)
    if m:
        return "geometry", m.group(1), None, m.group(2)
    if name in WEATHER_NAMES:
        return "weather", name, None, None
    raise ValueError(f"not a feature name: {name!r}")


def feature_group(name: str) -> str:
    return parse_feature_name(name)[0]


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def geometry_values(g: SegmentGeometry) -> list[float]:
    onehot = [1.0 if g.segment_type == t else 0.0 for t in SEGMENT_TYPES]
    return [float(g.speed_limit), float(g.lane_count), *onehot, float(g.miles)]


def weather_values(w: WeatherRecord) -> list[float]:
    return [
        w.temperature,
        w.humidity,
        w.wind_speed,
        w.precipitation,
        w.visibility,
        1.0 if w.condition == "Clear" else 0.0,
        1.0 if w.condition == "Rain" else 0.0,
    ]


def base_features(corpus: Corpus, segment_id: str, bin_start: int, weather: WeatherRecord | None = None,
                  baseline: BaselineTable | None = None) -> dict[str, float]:
    """The 22 base variables of one (segment, 5-min bin).

    A missing bin is imputed from the baseline (averages) and zeros (spreads).
    """
    try:
        seg = corpus.seg(segment_id)
    except KeyError:
        raise KeyError(f"no geometry for segment {segment_id!r}") from None
    b = corpus.grid.bin_of(bin_start)
    if corpus.grid.present(seg, b):
        stats = corpus.grid.values[seg, b]
    else:
        if baseline is None:
            baseline = corpus_baseline(corpus)
        stats = _imputed(baseline, None, seg, b % BINS_PER_DAY)
    if weather is None:
        weather = corpus.weather_at(seg, bin_start)
    out = {name: float(stats[k]) for k, name in enumerate(BASE_TRAFFIC)}
    wv = weather_values(weather) if weather is not None else [np.nan] * 5 + [0.0, 0.0]
    out.update(zip(WEATHER_NAMES, wv))
    out.update(zip(GEO_NAMES, geometry_values(corpus.geometry[seg])))
    return out


def _imputed(baseline: BaselineTable, fallback, seg: int, slot: int) -> np.ndarray:
    v = np.zeros(9)
    if baseline.has(seg, slot):
        v[0] = baseline.mean_speed[seg, slot]
        v[1] = baseline.mean_occupancy[seg, slot]
        v[2] = baseline.mean_volume[seg, slot]
    elif fallback is not None:
        v[:3] = fallback[seg]
    else:
        v[:3] = np.nan
    return v


def window_centers(topology, sc_segment: int, pc_segment: int, window_count: int = 4) -> list[int]:
    """Spatial centers for windows 1..W: start at the SC segment, step downstream, stop at PC."""
    if window_count < 1:
        raise ValueError("window_count must be at least 1")
    gap = topology.gap(sc_segment, pc_segment)
    if gap < 0:
        raise ValueError("primary segment lies upstream of the secondary segment")
    return [topology.offset(sc_segment, min(k, gap)) for k in range(window_count)]


def window_bin(grid, reference_time: int, window: int) -> int:
    """Local bin index of window ``window`` (1 = most recent) for a reference instant.

    The nominal window ends ``5 * window`` minutes before the reference; the
    latest complete 5-min bin ending no later than that is used.
    """
    end = reference_time - LEAD_SECONDS * window
    return (end - grid.t0) // BIN_SECONDS - 1


@dataclass(frozen=True)
class DynamicWindowSpec:
    reference_time: int
    sc_segment: str
    pc_segment: str
    window_count: int = 4

    def centers(self, corpus: Corpus) -> list[str]:
        idx = window_centers(corpus.topology, corpus.seg(self.sc_segment), corpus.seg(self.pc_segment), self.window_count)
        return [corpus.geometry[i].segment_id for i in idx]


@dataclass
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray
    imputed: tuple[str, ...] = ()  # traffic cells filled from the baseline, as "<window>_<position>"
    boundary: tuple[str, ...] = ()  # positions copied from the center
    weather_missing: bool = False

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))

    def __len__(self) -> int:
        return len(self.values)


class FeatureExtractor:
    """Vector extraction over one corpus and its baseline; stateless after construction."""

    def __init__(self, corpus: Corpus, baseline: BaselineTable | None = None):
        self.corpus = corpus
        self.baseline = baseline if baseline is not None else corpus_baseline(corpus)
        speed = corpus.grid.values[:, :, :3]
        with np.errstate(invalid="ignore"):
            counts = np.isfinite(speed).sum(axis=1)
            sums = np.nansum(speed, axis=1)
        self._fallback = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        w_means = []
        for s in range(len(corpus.topology)):
            v = corpus.weather.values[s]
            w_means.append(v.mean(axis=0) if len(v) else np.full(5, np.nan))
        w_means = np.array(w_means)
        overall = np.nanmean(w_means, axis=0) if np.isfinite(w_means).any() else np.zeros(5)
        self._weather_fill = np.where(np.isfinite(w_means), w_means, np.nan_to_num(overall))
        self._geometry = np.array([geometry_values(g) for g in corpus.geometry])

    # -- cells ------------------------------------------------------------

    def _cell(self, seg: int, b: int) -> tuple[np.ndarray, bool]:
        grid = self.corpus.grid
        if 0 <= b < grid.n_bins and grid.count[seg, b] > 0:
            return grid.values[seg, b], False
        return _imputed(self.baseline, self._fallback, seg, b % BINS_PER_DAY), True

    def _neighbours(self, seg: int) -> tuple[int, int]:
        topo = self.corpus.topology
        return int(topo.up[seg]), int(topo.down[seg])

    def _traffic_block(self, centers, bins, labels):
        """9 stats for up/center/down around each (center, bin)."""
        n = len(centers)
        out = np.empty((n, 3, 9))
        imputed, boundary = [], []
        missing = 0
        for k, (c, b) in enumerate(zip(centers, bins)):
            up, down = self._neighbours(c)
            center_vals, miss = self._cell(c, b)
            if miss:
                imputed.append(f"{labels[k]}_{labels.center}")
                missing += 1
            out[k, 1] = center_vals
            for j, nb in ((0, up), (2, down)):
                pos = labels.positions[j]
                if nb < 0:
                    out[k, j] = center_vals
                    boundary.append(f"{labels[k]}_{pos}")
                    continue
                vals, miss = self._cell(nb, b)
                if miss:
                    imputed.append(f"{labels[k]}_{pos}")
                    missing += 1
                out[k, j] = vals
        if missing > MAX_MISSING_FRACTION * 3 * n:
            raise ExtractionRejected(f"{missing} of {3 * n} traffic cells missing")
        return out, tuple(imputed), tuple(boundary)

    def _weather(self, seg: int, ts: int) -> tuple[list[float], bool]:
        rec = self.corpus.weather.nearest(seg, ts)
        if rec is None:
            return list(self._weather_fill[seg]) + [0.0, 0.0], True
        return weather_values(self.corpus.weather.record(seg, rec, "")), False

    def _geometry_block(self, seg: int) -> tuple[np.ndarray, list[str]]:
        up, down = self._neighbours(seg)
        rows, boundary = [], []
        for nb, pos in ((up, "up"), (seg, None), (down, "down")):
            if nb < 0:
                boundary.append(f"geometry_{pos}")
                nb = seg
            rows.append(self._geometry[nb])
        return np.concatenate(rows), boundary

    # -- vectors ----------------------------------------------------------

    def st_vector(self, sc_seg: int, pc_seg: int, reference_time: int, window_count: int = 4) -> FeatureVector:
        """Dynamic-window vector for a candidate secondary location at ``reference_time``."""
        centers = window_centers(self.corpus.topology, sc_seg, pc_seg, window_count)
        bins = [window_bin(self.corpus.grid, reference_time, w) for w in range(1, window_count + 1)]
        traffic, imputed, boundary = self._traffic_block(centers, bins, _Labels(range(1, window_count + 1), ST_POSITIONS))
        weather, w_missing = self._weather(sc_seg, reference_time - LEAD_SECONDS)
        geo, geo_boundary = self._geometry_block(sc_seg)
        values = np.concatenate([traffic.reshape(-1), weather, geo])
        return FeatureVector(st_feature_names(window_count), values, imputed, boundary + tuple(geo_boundary), w_missing)

    def st_vector_for(self, spec: DynamicWindowSpec) -> FeatureVector:
        c = self.corpus
        return self.st_vector(c.seg(spec.sc_segment), c.seg(spec.pc_segment), spec.reference_time, spec.window_count)

    def pc_vector(self, seg: int, crash_time: int) -> FeatureVector:
        """Pre-crash vector from the latest complete bin ending at least 5 min before ``crash_time``."""
        b = window_bin(self.corpus.grid, crash_time, 1)
        traffic, imputed, boundary = self._traffic_block([seg], [b], _Labels([1], PC_POSITIONS))
        weather, w_missing = self._weather(seg, crash_time - LEAD_SECONDS)
        geo, geo_boundary = self._geometry_block(seg)
        values = np.concatenate([traffic.reshape(-1), weather, geo])
        return FeatureVector(pc_feature_names(), values, imputed, boundary + tuple(geo_boundary), w_missing)

    def pc_vector_for(self, crash: CrashRecord) -> FeatureVector:
        return self.pc_vector(self.corpus.crash_segment(crash), crash.timestamp)


@dataclass
class _Labels:
    windows: object
    positions: tuple[str, ...]
    center: str = field(init=False)

    def __post_init__(self):
        self.windows = list(self.windows)
        self.center = self.positions[1]

    def __getitem__(self, k: int) -> int:
        return self.windows[k]


def extract_st_vector(corpus: Corpus, spec: DynamicWindowSpec, baseline: BaselineTable | None = None) -> FeatureVector:
    return FeatureExtractor(corpus, baseline).st_vector_for(spec)


def extract_pc_vector(corpus: Corpus, crash: CrashRecord, baseline: BaselineTable | None = None) -> FeatureVector:
    return FeatureExtractor(corpus, baseline).pc_vector_for(crash)
