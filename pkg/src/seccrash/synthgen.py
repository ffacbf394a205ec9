"""Synthetic corridor traffic with injected crashes and backward-moving congestion.

Each crash starts a queue that grows upstream at ``wave_speed`` and dissolves
after a clearance and recovery period. Secondary crashes are dropped into the
queue of a primary with a probability that grows with the queue's intensity.
Crashes are placed so that no crash sits inside another crash's 2 mi / 2 h
detection envelope unless the two form a primary/secondary pair, which keeps
the ground truth pairing unambiguous.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from .corpus import (
    BIN_SECONDS,
    BINS_PER_DAY,
    CONDITIONS,
    DAY_SECONDS,
    ENVELOPE_SECONDS,
    Corpus,
    CrashRecord,
    SegmentGeometry,
    Topology,
    WeatherTable,
    aggregate_observations,
    empty_grid,
    format_ts,
    parse_ts,
    scatter_aggregates,
)

log = logging.getLogger(__name__)

FREEWAYS = ("I-4", "I-95", "I-75", "I-275", "SR-408", "I-10")
TYPE_INTENSITY = {"Basic": 0.0, "Merge": 0.15, "Weaving": 0.12, "Diverge": 0.05}
TYPE_CRASH_WEIGHT = {"Basic": 1.0, "Merge": 1.5, "Weaving": 1.5, "Diverge": 1.2}
TYPE_PEAK_FACTOR = {"Basic": 1.0, "Merge": 1.2, "Weaving": 1.2, "Diverge": 1.1}
VEHICLE_FEET = 22.0


@dataclass
class ScenarioConfig:
    corridors: int = 1
    segment_count: int = 30
    segment_miles: float = 0.4
    miles_jitter: float = 0.1
    days: int = 180
    start_date: str = "2021-01-04"
    observation_seconds: int = 30
    free_flow_speed: float = 67.0
    peak_dip: float = 10.0
    morning_peak: float = 8.0
    evening_peak: float = 17.5
    noise_std: float = 3.0
    crash_rate: float = 7.0
    wave_speed: float = 12.0
    congestion_depth: float = 25.0
    clearance_minutes: float = 45.0
    recovery_minutes: float = 30.0
    queue_miles: float = 1.0
    intensity_noise: float = 0.35
    intensity_power: float = 4.0
    hotspot_spread: float = 1.2
    secondary_ratio: float = 0.2
    min_secondary_drop: float = 6.0
    weather: str = "inert"
    rain_start_prob: float = 0.04
    rain_stop_prob: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.wave_speed <= 0:
            raise ValueError("wave_speed must be positive")
        if not 0 <= self.secondary_ratio < 1:
            raise ValueError("secondary_ratio must lie in [0, 1)")
        if self.weather not in ("inert", "modulating"):
            raise ValueError("weather must be 'inert' or 'modulating'")
        if BIN_SECONDS % self.observation_seconds:
            raise ValueError("observation_seconds must divide 300")
        if self.days < 1 or self.segment_count < 2 or self.corridors < 1:
            raise ValueError("need at least one day, one corridor and two segments")
        if self.congestion_depth * 0.5 * 0.3 <= 0.25 * self.noise_std:
            log.warning("congestion_depth is not detectable above the configured noise")
        for name in ("rain_start_prob", "rain_stop_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def t0(self) -> int:
        return int(pd.Timestamp(self.start_date, tz="UTC").timestamp())

    @property
    def modulating(self) -> bool:
        return self.weather == "modulating"


def parse_config(text: str) -> ScenarioConfig:
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    types = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
    cfg = ScenarioConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ScenarioConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# --------------------------------------------------------------------------
# Deterministic fields
# --------------------------------------------------------------------------


def demand(cfg: ScenarioConfig, seconds_of_day) -> np.ndarray:
    """Relative demand in [0.1, 1] over the day."""
    h = np.asarray(seconds_of_day, dtype=float) / 3600.0
    morning = np.exp(-0.5 * ((h - cfg.morning_peak) / 1.0) ** 2)
    evening = np.exp(-0.5 * ((h - cfg.evening_peak) / 1.2) ** 2)
    midday = 0.45 / (1 + np.exp(-(h - 6.5) * 2)) / (1 + np.exp((h - 20.5) * 2))
    return 0.1 + 0.9 * np.maximum(np.maximum(morning, evening), midday)


def free_flow(cfg: ScenarioConfig, geometry) -> np.ndarray:
    return np.array([cfg.free_flow_speed - 70 + g.speed_limit for g in geometry], dtype=float)


def speed_profile(cfg: ScenarioConfig, geometry) -> np.ndarray:
    """Noise-free, crash-free speed per segment at every observation instant of a day."""
    tod = np.arange(0, DAY_SECONDS, cfg.observation_seconds)
    d = demand(cfg, tod)
    dip = cfg.peak_dip * np.clip(d - 0.5, 0, None) / 0.5
    factor = np.array([TYPE_PEAK_FACTOR[g.segment_type] for g in geometry])
    return free_flow(cfg, geometry)[:, None] - factor[:, None] * dip[None, :]


def bin_profile(cfg: ScenarioConfig, geometry) -> np.ndarray:
    """Configured diurnal speed profile averaged to the 288 daily slots."""
    p = speed_profile(cfg, geometry)
    per_bin = BIN_SECONDS // cfg.observation_seconds
    return p.reshape(len(geometry), BINS_PER_DAY, per_bin).mean(axis=2)


# --------------------------------------------------------------------------
# Crash waves
# --------------------------------------------------------------------------


@dataclass
class Wave:
    crash_index: int
    seg: int  # global segment index of the crash
    t: int
    intensity: float
    queue: float  # miles
    clearance: float  # minutes
    end: float  # minutes after the crash
    depth: float  # mph at the crash segment
    distances: np.ndarray  # cumulative upstream miles for gaps 0..G
    segments: np.ndarray  # global indices for gaps 0..G


def make_wave(cfg: ScenarioConfig, topo: Topology, crash_index: int, seg: int, t: int, intensity: float) -> Wave:
    queue = min(cfg.queue_miles * intensity, 2.0 - topo.miles[seg] - 0.05)
    segs = [seg]
    dists = [0.0]
    cur = seg
    while topo.up[cur] >= 0:
        nxt = int(topo.up[cur])
        d = dists[-1] + topo.miles[nxt]
        if d > queue:
            break
        segs.append(nxt)
        dists.append(d)
        cur = nxt
    clearance = cfg.clearance_minutes * intensity
    return Wave(
        crash_index, seg, int(t), float(intensity), float(max(queue, 0.0)), clearance,
        clearance + cfg.recovery_minutes, cfg.congestion_depth * intensity,
        np.array(dists), np.array(segs, dtype=np.int64),
    )


def wave_drop(cfg: ScenarioConfig, wave: Wave, gap: int, ts) -> np.ndarray:
    """Speed drop (mph) imposed by a wave at upstream gap ``gap`` and instants ``ts``."""
    tau = (np.asarray(ts, dtype=float) - wave.t) / 60.0
    d = wave.distances[gap]
    arrive = 60.0 * d / cfg.wave_speed
    on = (tau >= arrive) & (tau < wave.end)
    spatial = 1.0 - 0.5 * d / wave.queue if wave.queue > 0 else 1.0
    if cfg.recovery_minutes > 0:
        temporal = np.where(tau < wave.clearance, 1.0,
                            np.maximum(0.3, 1.0 - (tau - wave.clearance) / cfg.recovery_minutes))
    else:
        temporal = np.ones_like(tau)
    return np.where(on, wave.depth * spatial * temporal, 0.0)


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------


@dataclass
class InjectedCrash:
    crash_id: str
    segment_id: str
    timestamp: int
    role: str  # primary | secondary | normal
    paired_primary_id: str | None
    segment_gap: int | None
    intensity: float
    raining: bool


@dataclass
class GroundTruth:
    crashes: list[InjectedCrash]
    impact_cells: dict[str, list[tuple[str, int]]]  # primary id -> (segment_id, bin_start)
    config: ScenarioConfig

    def pairs(self) -> set[tuple[str, str]]:
        return {(c.paired_primary_id, c.crash_id) for c in self.crashes if c.role == "secondary"}

    def role_counts(self) -> dict[str, int]:
        out = {"primary": 0, "secondary": 0, "normal": 0}
        for c in self.crashes:
            out[c.role] += 1
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "crashes": [dataclasses.asdict(c) for c in self.crashes],
                "pairings": sorted([list(p) for p in self.pairs()]),
                "impact_cells": {
                    k: [[s, format_ts(b)] for s, b in v] for k, v in sorted(self.impact_cells.items())
                },
                "config": dataclasses.asdict(self.config),
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        obj = json.loads(text)
        crashes = [InjectedCrash(**c) for c in obj["crashes"]]
        cells = {k: [(s, parse_ts(b)) for s, b in v] for k, v in obj["impact_cells"].items()}
        return cls(crashes, cells, ScenarioConfig(**obj["config"]))


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    truth: GroundTruth
    config: ScenarioConfig
    _waves: list = field(default_factory=list, repr=False)
    _rain: np.ndarray = field(default=None, repr=False)  # (corridors, hours) bool

    def traffic_day(self, day: int) -> pd.DataFrame:
        seg, ts, speed, vol, occ = _observe_day(self.config, self.corpus.topology, self._waves, self._rain, day)
        ids = np.array([g.segment_id for g in self.corpus.geometry])
        return pd.DataFrame(
            {
                "segment_id": ids[seg],
                "timestamp_utc": [format_ts(t) for t in ts],
                "speed_mph": speed,
                "volume_veh_per_30s": vol,
                "occupancy_pct": occ,
            }
        )

    def write(self, directory) -> None:
        """Write traffic/crashes/weather/geometry CSVs plus ground truth and config."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "traffic.csv"
        for day in range(self.config.days):
            self.traffic_day(day).to_csv(path, index=False, mode="w" if day == 0 else "a", header=day == 0)
        for name in ("crashes", "weather", "geometry"):
            self.corpus.tables[name].to_csv(directory / f"{name}.csv", index=False)
        (directory / "ground_truth.json").write_text(self.truth.to_json())
        (directory / "scenario.cfg").write_text(format_config(self.config))


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


def _geometry(cfg: ScenarioConfig, rng: np.random.Generator) -> list[SegmentGeometry]:
    out = []
    types = list(TYPE_INTENSITY)
    for c in range(cfg.corridors):
        freeway = FREEWAYS[c % len(FREEWAYS)] + ("" if c < len(FREEWAYS) else f"-{c}")
        for p in range(cfg.segment_count):
            kind = types[int(rng.choice(4, p=[0.55, 0.15, 0.15, 0.15]))]
            miles = cfg.segment_miles + rng.uniform(-cfg.miles_jitter, cfg.miles_jitter)
            out.append(
                SegmentGeometry(
                    segment_id=f"C{c}S{p:02d}",
                    freeway=freeway,
                    direction="NB",
                    order_index=p,
                    miles=round(max(miles, 0.05), 3),
                    speed_limit=int(rng.choice([60, 65, 70], p=[0.2, 0.3, 0.5])),
                    lane_count=int(rng.choice([2, 3, 4, 5], p=[0.2, 0.4, 0.3, 0.1])),
                    segment_type=kind,
                )
            )
    return out


def _weather(cfg: ScenarioConfig, topo: Topology, rng: np.random.Generator):
    """Hourly weather per corridor (shared by its segments, small per-segment offsets)."""
    hours = cfg.days * 24
    n_corr = len(topo.corridors)
    rain = np.zeros((n_corr, hours), dtype=bool)
    other = np.zeros((n_corr, hours), dtype=bool)
    for c in range(n_corr):
        state = False
        for h in range(hours):
            state = rng.random() >= cfg.rain_stop_prob if state else rng.random() < cfg.rain_start_prob
            rain[c, h] = state
        other[c] = ~rain[c] & (rng.random(hours) < 0.12)
    hod = np.arange(hours) % 24
    temp_base = 72 + 9 * np.sin((hod - 9) / 24 * 2 * np.pi)
    times, values, conds = [], [], []
    t_hours = cfg.t0 + np.arange(hours, dtype=np.int64) * 3600
    for s in range(len(topo)):
        c = int(topo.corridor_of[s])
        r = rain[c]
        temp = temp_base - 6 * r + rng.normal(0, 1.5, hours)
        humid = np.clip(60 + 30 * r + rng.normal(0, 8, hours), 0, 100)
        wind = np.abs(rng.normal(3 + 2 * r, 1.2, hours))
        precip = np.where(r, rng.gamma(2.0, 1.5, hours), 0.0)
        vis = np.where(r, rng.uniform(2, 6, hours), np.where(other[c], rng.uniform(5, 9, hours), 10.0))
        v = np.column_stack([temp, humid, wind, precip, vis])
        v = np.column_stack([np.round(v[:, k], d) for k, d in enumerate((1, 1, 2, 2, 2))])
        times.append(t_hours)
        values.append(v)
        conds.append(np.where(r, 1, np.where(other[c], 2, 0)).astype(np.int64))
    return WeatherTable(times, values, conds), rain


class _Occupancy:
    """Crash cells and envelope rectangles used to keep crashes from interfering."""

    def __init__(self, topo: Topology, t0: int):
        self.topo = topo
        self.t0 = t0
        self.items: dict[int, list] = {}  # hour bucket -> [(cluster, corridor, lo, hi, b_lo, b_hi, pos, b)]

    def rect(self, seg: int, t: int):
        chain = self.topo.upstream_chain(seg)
        pos = self.topo.position
        b = (t - self.t0) // BIN_SECONDS
        b_hi = (t + ENVELOPE_SECONDS - 1 - self.t0) // BIN_SECONDS
        return int(self.topo.corridor_of[seg]), int(pos[chain[-1]]), int(pos[seg]), b, b_hi, int(pos[seg]), b

    def conflicts(self, seg: int, t: int, cluster: int) -> bool:
        corr, lo, hi, b_lo, b_hi, p, b = self.rect(seg, t)
        h = (t - self.t0) // 3600
        for bucket in range(h - 3, h + 4):
            for item in self.items.get(bucket, ()):
                if item[0] == cluster or item[1] != corr:
                    continue
                _, _, lo2, hi2, bl2, bh2, p2, b2 = item
                if lo2 <= p <= hi2 and bl2 <= b <= bh2:
                    return True
                if lo <= p2 <= hi and b_lo <= b2 <= b_hi:
                    return True
        return False

    def add(self, seg: int, t: int, cluster: int) -> None:
        h = (t - self.t0) // 3600
        self.items.setdefault(h, []).append((cluster,) + self.rect(seg, t))


def _intensity(cfg, geo: SegmentGeometry, t: int, raining: bool, rng) -> float:
    log_i = (
        0.8 * (float(demand(cfg, t % DAY_SECONDS)) - 0.4)
        + TYPE_INTENSITY[geo.segment_type]
        - 0.04 * (geo.lane_count - 3)
        + (0.3 if raining and cfg.modulating else 0.0)
        + rng.normal(0, cfg.intensity_noise)
    )
    return float(np.clip(np.exp(log_i), 0.5, 1.6))


def _solve_scale(weights: np.ndarray, target: float) -> float:
    if target <= 0 or len(weights) == 0:
        return 0.0
    if target >= len(weights):
        return float(1.0 / weights.min())
    lo, hi = 0.0, 1.0 / weights.min()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * weights).sum() < target:
            lo = mid
        else:
            hi = mid
    return hi


def generate_corpus(cfg: ScenarioConfig) -> SyntheticCorpus:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    geometry = _geometry(cfg, rng)
    topo = Topology(geometry)
    t0 = cfg.t0
    weather, rain = _weather(cfg, topo, np.random.default_rng([cfg.seed, 2]))

    # base crashes, one corridor at a time
    crng = np.random.default_rng([cfg.seed, 3])
    occ = _Occupancy(topo, t0)
    obs = cfg.observation_seconds
    per_day = DAY_SECONDS // obs
    tod = np.arange(per_day) * obs
    day_weight = 0.25 + demand(cfg, tod)
    base: list[tuple[int, int]] = []  # (seg, t)
    for c, members in enumerate(topo.members):
        w = np.tile(day_weight, cfg.days)
        if cfg.modulating:
            w = w * np.where(np.repeat(rain[c], 3600 // obs), 1.8, 1.0)
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        seg_w = np.array([TYPE_CRASH_WEIGHT[geometry[s].segment_type] for s in members])
        seg_w = seg_w * np.exp(crng.normal(0, cfg.hotspot_spread, len(members)))
        seg_w /= seg_w.sum()
        target = crng.poisson(cfg.crash_rate * cfg.days)
        accepted = tries = 0
        while accepted < target and tries < 20 * target + 100:
            tries += 1
            k = int(np.searchsorted(cdf, crng.random(), side="right"))
            t = t0 + k * obs + int(crng.integers(0, obs))
            seg = int(members[crng.choice(len(members), p=seg_w)])
            if occ.conflicts(seg, t, cluster=-1 - len(base)):
                continue
            occ.add(seg, t, cluster=len(base))
            base.append((seg, t))
            accepted += 1
        if accepted < target:
            log.warning("corridor %d: placed %d of %d crashes", c, accepted, target)

    def raining(seg, t):
        return bool(rain[topo.corridor_of[seg], min((t - t0) // 3600, rain.shape[1] - 1)])

    order = sorted(range(len(base)), key=lambda i: base[i][1])
    base = [base[i] for i in order]
    # occupancy clusters were numbered by placement order; renumber to sorted order
    remap = {old: new for new, old in enumerate(order)}
    for bucket in occ.items.values():
        for j, item in enumerate(bucket):
            bucket[j] = (remap[item[0]],) + item[1:]

    irng = np.random.default_rng([cfg.seed, 4])
    intens = np.array([_intensity(cfg, geometry[s], t, raining(s, t), irng) for s, t in base])
    weights = intens**cfg.intensity_power * np.array([2.0 if cfg.modulating and raining(s, t) else 1.0 for s, t in base])
    n_sec_target = cfg.secondary_ratio / (1 - cfg.secondary_ratio) * len(base)
    scale = _solve_scale(weights, n_sec_target)

    waves = [make_wave(cfg, topo, i, s, t, intens[i]) for i, (s, t) in enumerate(base)]
    srng = np.random.default_rng([cfg.seed, 5])
    secondaries: list[tuple[int, int, int, float, int]] = []  # (primary idx, seg, t, intensity, gap)
    per_bin = BIN_SECONDS // obs
    for i, wave in enumerate(waves):
        p = min(1.0, scale * weights[i])
        if srng.random() >= p:
            continue
        # candidate instants: inside the queue with a clearly visible bin-average drop
        start = (wave.t // BIN_SECONDS) * BIN_SECONDS
        n_bins = int(wave.end * 60) // BIN_SECONDS + 2
        grid = start + np.arange(n_bins * per_bin, dtype=np.int64) * obs
        cands = []
        for g in range(len(wave.segments)):
            drop = wave_drop(cfg, wave, g, grid)
            bin_avg = np.repeat(drop.reshape(n_bins, per_bin).mean(axis=1), per_bin)
            ok = (drop > 0) & (grid > wave.t) & (bin_avg >= cfg.min_secondary_drop)
            for k in np.flatnonzero(ok):
                cands.append((g, int(grid[k]), float(drop[k])))
        # weighted order without replacement, weight = local drop
        keys = np.log(srng.random(len(cands))) / np.array([c[2] for c in cands]) if cands else []
        cands = [cands[k] for k in np.argsort(-np.asarray(keys), kind="stable")]
        for g, ts, _ in cands[:200]:
            seg = int(wave.segments[g])
            t = ts + int(srng.integers(0, obs))
            if t <= wave.t or occ.conflicts(seg, t, cluster=i):
                continue
            occ.add(seg, t, cluster=i)
            s_int = _intensity(cfg, geometry[seg], t, raining(seg, t), irng)
            secondaries.append((i, seg, t, s_int, g))
            break
        else:
            log.debug("no room for a secondary after crash %d", i)

    # assemble crash list in time order
    rows = [(t, s, "base", i) for i, (s, t) in enumerate(base)]
    rows += [(t, s, "sec", j) for j, (i, s, t, _, _) in enumerate(secondaries)]
    rows.sort(key=lambda r: (r[0], r[1]))
    ids = {}
    for n, (t, s, kind, j) in enumerate(rows):
        ids[(kind, j)] = f"K{n + 1:05d}"
    has_sec = {i for i, *_ in secondaries}
    injected = []
    all_waves = []
    for t, s, kind, j in rows:
        cid = ids[(kind, j)]
        if kind == "base":
            role = "primary" if j in has_sec else "normal"
            injected.append(InjectedCrash(cid, geometry[s].segment_id, t, role, None, None, float(intens[j]), raining(s, t)))
            w = waves[j]
        else:
            i, _, _, s_int, g = secondaries[j]
            injected.append(InjectedCrash(cid, geometry[s].segment_id, t, "secondary", ids[("base", i)], g, s_int, raining(s, t)))
            w = make_wave(cfg, topo, len(all_waves), s, t, s_int)
        w.crash_index = len(all_waves)
        all_waves.append(w)

    crashes = tuple(
        CrashRecord(c.crash_id, c.segment_id, c.timestamp, geometry[topo.index[c.segment_id]].freeway, "NB")
        for c in injected
    )
    n_days = cfg.days
    grid = empty_grid(len(topo), t0, n_days)
    for day in range(n_days):
        seg, ts, speed, vol, occp = _observe_day(cfg, topo, all_waves, rain, day)
        scatter_aggregates(grid, *aggregate_observations(seg, ts, speed, vol, occp))

    truth_cells = _truth_cells(cfg, topo, all_waves, injected, t0, n_days)
    truth = GroundTruth(injected, truth_cells, cfg)
    tables = {
        "crashes": pd.DataFrame(
            {
                "crash_id": [c.crash_id for c in crashes],
                "segment_id": [c.segment_id for c in crashes],
                "timestamp_utc": [format_ts(c.timestamp) for c in crashes],
                "freeway": [c.freeway for c in crashes],
                "direction": [c.direction for c in crashes],
            }
        ),
        "weather": _weather_frame(topo, weather),
        "geometry": pd.DataFrame([dataclasses.asdict(g) for g in geometry]),
    }
    corpus = Corpus(topo, grid, crashes, weather, n_days, tables)
    return SyntheticCorpus(corpus, truth, cfg, all_waves, rain)


def _weather_frame(topo: Topology, weather: WeatherTable) -> pd.DataFrame:
    parts = []
    for s, g in enumerate(topo.geometry):
        v = weather.values[s]
        parts.append(
            pd.DataFrame(
                {
                    "segment_id": g.segment_id,
                    "timestamp_utc": [format_ts(t) for t in weather.times[s]],
                    "temp_f": v[:, 0],
                    "humidity_pct": v[:, 1],
                    "wind_mps": v[:, 2],
                    "precip_mm": v[:, 3],
                    "visibility_mi": v[:, 4],
                    "condition": [CONDITIONS[k] for k in weather.conditions[s]],
                }
            )
        )
    return pd.concat(parts, ignore_index=True)


def _day_drop(cfg, topo, waves, day: int) -> np.ndarray:
    """Maximum wave drop per (segment, instant) for one day."""
    obs = cfg.observation_seconds
    day_start = cfg.t0 + day * DAY_SECONDS
    n = DAY_SECONDS // obs
    drop = np.zeros((len(topo), n))
    for w in waves:
        w_end = w.t + w.end * 60
        if w_end <= day_start or w.t >= day_start + DAY_SECONDS:
            continue
        k_lo = max(0, (w.t - day_start) // obs)
        k_hi = min(n, int(np.ceil((w_end - day_start) / obs)) + 1)
        ts = day_start + np.arange(k_lo, k_hi) * obs
        for g, seg in enumerate(w.segments):
            np.maximum(drop[seg, k_lo:k_hi], wave_drop(cfg, w, g, ts), out=drop[seg, k_lo:k_hi])
    return drop


def _observe_day(cfg, topo, waves, rain, day: int):
    """Raw observations for one day, ordered by (segment, timestamp)."""
    rng = np.random.default_rng([cfg.seed, 100, day])
    obs = cfg.observation_seconds
    n = DAY_SECONDS // obs
    S = len(topo)
    geometry = topo.geometry
    day_start = cfg.t0 + day * DAY_SECONDS
    ts = day_start + np.arange(n, dtype=np.int64) * obs
    profile = speed_profile(cfg, geometry)
    drop = _day_drop(cfg, topo, waves, day)
    if cfg.modulating:
        hours = np.minimum((ts - cfg.t0) // 3600, rain.shape[1] - 1)
        wet = rain[topo.corridor_of][:, hours]
        profile = profile - 3.0 * wet
    depth = max(cfg.congestion_depth, 1.0)
    noise = rng.standard_normal((S, n)) * cfg.noise_std * (1.0 + 1.5 * drop / depth)
    speed = np.round(np.clip(profile - drop + noise, 3.0, 90.0), 2)
    lanes = np.array([g.lane_count for g in geometry], dtype=float)[:, None]
    q = lanes * (1.5 + 8.0 * demand(cfg, ts - day_start))[None, :]
    flow = q * (0.5 + 0.5 * np.clip(speed / profile, 0, 1))
    scale = cfg.noise_std / 3.0
    vol = np.round(np.clip(flow + rng.standard_normal((S, n)) * scale * np.sqrt(q), 0, None))
    density = vol * (3600 / 30) / lanes / np.maximum(speed, 3.0)
    occp = 100 * density * VEHICLE_FEET / 5280 + rng.standard_normal((S, n)) * 0.3 * scale
    occp = np.round(np.clip(occp, 0, 100), 2)
    seg = np.repeat(np.arange(S, dtype=np.int64), n)
    return seg, np.tile(ts, S), speed.ravel(), vol.ravel(), occp.ravel()


def _truth_cells(cfg, topo, waves, injected, t0, n_days) -> dict[str, list[tuple[str, int]]]:
    """Congested cells inside each primary's envelope that connect to its crash cell."""
    out = {}
    obs = cfg.observation_seconds
    for c in injected:
        if c.role != "primary":
            continue
        seg = topo.index[c.segment_id]
        chain = topo.upstream_chain(seg)
        b0 = (c.timestamp - t0) // BIN_SECONDS
        b1 = min((c.timestamp + ENVELOPE_SECONDS - 1 - t0) // BIN_SECONDS, n_days * BINS_PER_DAY - 1)
        ts = t0 + np.arange(b0 * BIN_SECONDS, (b1 + 1) * BIN_SECONDS, obs)
        congested = np.zeros((len(chain), b1 - b0 + 1), dtype=bool)
        for w in waves:
            if w.t + w.end * 60 <= ts[0] or w.t > ts[-1]:
                continue
            for g, wseg in enumerate(w.segments):
                if wseg in chain:
                    r = chain.index(int(wseg))
                    d = wave_drop(cfg, w, g, ts)
                    congested[r] |= (d > 0).reshape(-1, BIN_SECONDS // obs).any(axis=1)
        seed_mask = congested.copy()
        seed_mask[0, 0] = True
        labels, _ = ndimage.label(seed_mask, structure=np.ones((3, 3)))
        member = (labels == labels[0, 0]) & congested
        cells = [
            (topo.geometry[chain[r]].segment_id, int(t0 + (b0 + k) * BIN_SECONDS))
            for r, k in zip(*np.nonzero(member))
        ]
        out[c.crash_id] = sorted(cells, key=lambda x: (x[1], x[0]))
    return out


# --------------------------------------------------------------------------
# Comparison against detected pairings
# --------------------------------------------------------------------------


@dataclass
class OracleReport:
    recall: float
    precision: float
    true_pairs: int
    detected_pairs: int
    matched_pairs: int
    mean_jaccard: float | None


def oracle_compare(truth: GroundTruth, classifications, regions=None) -> OracleReport:
    """Pairing recall/precision and mean Jaccard overlap of impact-cell sets.

    ``classifications`` is an iterable of objects with ``crash_id``,
    ``crash_class`` and ``paired_primary_id``; ``regions`` optionally maps a
    primary id to a set of (segment_id, bin_start) cells.
    """
    true_pairs = truth.pairs()
    found = {(c.paired_primary_id, c.crash_id) for c in classifications if c.paired_primary_id is not None}
    matched = len(true_pairs & found)
    recall = matched / len(true_pairs) if true_pairs else 1.0
    precision = matched / len(found) if found else 1.0
    jac = None
    if regions is not None and truth.impact_cells:
        scores = []
        for pid, cells in truth.impact_cells.items():
            a, b = set(cells), set(regions.get(pid, ()))
            union = a | b
            scores.append(len(a & b) / len(union) if union else 1.0)
        jac = float(np.mean(scores))
    return OracleReport(recall, precision, len(true_pairs), len(found), matched, jac)
