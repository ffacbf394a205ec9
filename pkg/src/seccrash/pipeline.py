"""Streaming replay of the deployment loop: per-crash monitoring sessions scored every minute."""
from __future__ import annotations

import heapq
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .corpus import BIN_SECONDS, Corpus, CrashRecord, format_ts
from .ensemble import ModelBundle, hybrid_predict
from .experiment import select
from .features import ExtractionRejected, FeatureExtractor, pc_feature_names, st_feature_names, window_bin

log = logging.getLogger(__name__)

SESSION_SECONDS = 2 * 3600
CADENCE_SECONDS = 60
WATCHED_UPSTREAM = 5
DEFAULT_ALERT_THRESHOLD = 0.9


class ReplayError(RuntimeError):
    pass


@dataclass(frozen=True)
class BinArrival:
    """All segments' bin ending at ``time`` is now available."""

    time: int


@dataclass(frozen=True)
class CrashEvent:
    time: int
    crash: CrashRecord


def corpus_stream(corpus: Corpus) -> Iterator[BinArrival | CrashEvent]:
    """Time-ordered bin arrivals and crash reports for a whole corpus (bins first on ties)."""
    crashes = sorted(corpus.crashes, key=lambda c: (c.timestamp, c.crash_id))
    k = 0
    for end in range(corpus.t0 + BIN_SECONDS, corpus.t_end + 1, BIN_SECONDS):
        while k < len(crashes) and crashes[k].timestamp < end:
            yield CrashEvent(crashes[k].timestamp, crashes[k])
            k += 1
        yield BinArrival(end)
    for c in crashes[k:]:
        yield CrashEvent(c.timestamp, c)


@dataclass
class MonitoringSession:
    crash_id: str
    crash_segment: int
    watched: list[int]  # crash segment first, then upstream
    start: int
    horizon: int = SESSION_SECONDS
    cadence: int = CADENCE_SECONDS
    pc_prob: float = 0.0
    boundary: bool = False
    updates_run: int = 0

    @property
    def end(self) -> int:
        return self.start + self.horizon

    def update_times(self, stream_end: int | None = None) -> list[int]:
        times = range(self.start, self.end, self.cadence)
        return [t for t in times if stream_end is None or t < stream_end]


def open_session(corpus: Corpus, crash: CrashRecord) -> MonitoringSession:
    seg = corpus.crash_segment(crash)
    watched = [seg]
    topo = corpus.topology
    while len(watched) < WATCHED_UPSTREAM + 1:
        up = int(topo.up[watched[-1]])
        if up < 0:
            break
        watched.append(up)
    return MonitoringSession(crash.crash_id, seg, watched, crash.timestamp, boundary=len(watched) < WATCHED_UPSTREAM + 1)


def session_minutes(session: MonitoringSession, stream_end: int | None = None) -> int:
    """Number of scheduled per-minute updates (120 for a full two-hour session)."""
    return len(session.update_times(stream_end))


@dataclass(frozen=True)
class Alert:
    emitted_at: str
    crash_id: str
    segment_id: str
    segment_gap: int
    minute: int
    hybrid_prob: float
    pc_prob: float
    sc1_prob: float
    sc2_prob: float
    threshold: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class ReplayResult:
    alerts: list[Alert] = field(default_factory=list)
    sessions: list[MonitoringSession] = field(default_factory=list)
    update_seconds: list[float] = field(default_factory=list)
    scores: list[tuple] = field(default_factory=list)  # (time, crash_id, segment, hybrid, pc, sc1, sc2)

    def write(self, path) -> None:
        write_alerts(self.alerts, path)


def write_alerts(alerts: Iterable[Alert], path) -> None:
    with open(path, "w") as fh:
        for a in alerts:
            fh.write(a.to_json() + "\n")


def read_alerts(path) -> list[Alert]:
    return [Alert(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


class ReplayEngine:
    """Consumes a time-ordered stream and scores every open session once per minute."""

    def __init__(self, corpus: Corpus, bundle: ModelBundle, alert_threshold: float = DEFAULT_ALERT_THRESHOLD,
                 extractor: FeatureExtractor | None = None, speed: float = 0.0, keep_scores: bool = False):
        self.corpus = corpus
        self.bundle = bundle
        self.threshold = alert_threshold
        self.extractor = extractor or FeatureExtractor(corpus)
        self.speed = speed
        self.keep_scores = keep_scores
        self.window_count = bundle.window_count
        self.st_names = st_feature_names(self.window_count)
        self.pc_names = pc_feature_names()
        self.policy = bundle.hybrid_policy()
        self.watermark = corpus.t0
        self.clock = None
        self.queue: list[tuple[int, int, int]] = []  # (update time, session order, minute index)
        self.result = ReplayResult()

    # -- scoring --------------------------------------------------------

    def _pc_score(self, session: MonitoringSession, crash: CrashRecord) -> float:
        try:
            v = self.extractor.pc_vector(session.crash_segment, crash.timestamp).values
        except ExtractionRejected:
            log.info("%s: PC vector rejected, PC score 0", crash.crash_id)
            return 0.0
        model = self.bundle.pc
        return float(model.predict_proba(select(v[None, :], self.pc_names, model.feature_names))[0])

    def _update(self, session: MonitoringSession, now: int, minute: int) -> None:
        tick = time.perf_counter()
        needed = self.corpus.grid.bin_start(window_bin(self.corpus.grid, now, 1)) + BIN_SECONDS
        if needed > self.watermark:
            raise ReplayError(f"update at {format_ts(now)} needs data up to {format_ts(needed)} not yet streamed")
        rows, segs = [], []
        for seg in session.watched:
            try:
                rows.append(self.extractor.st_vector(seg, session.crash_segment, now, self.window_count).values)
                segs.append(seg)
            except ExtractionRejected:
                log.debug("%s minute %d: segment %d rejected", session.crash_id, minute, seg)
        if rows:
            X = np.vstack(rows)
            sc1 = self.bundle.sc1.predict_proba(select(X, self.st_names, self.bundle.sc1.feature_names))
            sc2 = self.bundle.sc2.predict_proba(select(X, self.st_names, self.bundle.sc2.feature_names))
            pc = np.full(len(rows), session.pc_prob)
            prob, _ = hybrid_predict(pc, sc1, sc2, self.policy)
            topo = self.corpus.topology
            for i, seg in enumerate(segs):
                gap = topo.gap(seg, session.crash_segment)
                if self.keep_scores:
                    self.result.scores.append((now, session.crash_id, seg, float(prob[i]), session.pc_prob,
                                               float(sc1[i]), float(sc2[i])))
                if prob[i] > self.threshold:
                    self.result.alerts.append(Alert(
                        format_ts(now), session.crash_id, self.corpus.geometry[seg].segment_id, gap, minute,
                        float(prob[i]), session.pc_prob, float(sc1[i]), float(sc2[i]), self.threshold))
        session.updates_run += 1
        self.result.update_seconds.append(time.perf_counter() - tick)

    # -- event loop -----------------------------------------------------

    def _run_due(self, before: int) -> None:
        """Run every queued update strictly earlier than ``before``."""
        while self.queue and self.queue[0][0] < before:
            t, order, minute = heapq.heappop(self.queue)
            if self.speed > 0 and self.clock is not None and t > self.clock:
                time.sleep((t - self.clock) / self.speed)
            self.clock = t
            session = self.result.sessions[order]
            self._update(session, t, minute)
            if minute + 1 < session.horizon // session.cadence:
                heapq.heappush(self.queue, (t + session.cadence, order, minute + 1))

    def feed(self, event) -> None:
        last = getattr(self, "_last_time", None)
        if last is not None and event.time < last:
            raise ReplayError(f"out-of-order event at {format_ts(event.time)} after {format_ts(last)}")
        self._last_time = event.time
        self._run_due(event.time)
        if isinstance(event, BinArrival):
            self.watermark = max(self.watermark, event.time)
        elif isinstance(event, CrashEvent):
            session = open_session(self.corpus, event.crash)
            session.pc_prob = self._pc_score(session, event.crash)
            self.result.sessions.append(session)
            heapq.heappush(self.queue, (session.start, len(self.result.sessions) - 1, 0))
        else:
            raise ReplayError(f"unknown event {event!r}")

    def finish(self, stream_end: int) -> ReplayResult:
        self._run_due(stream_end)
        self.queue.clear()
        return self.result


def replay(corpus: Corpus, bundle: ModelBundle, alert_threshold: float = DEFAULT_ALERT_THRESHOLD,
           stream: Iterable | None = None, stream_end: int | None = None, speed: float = 0.0,
           extractor: FeatureExtractor | None = None, keep_scores: bool = False) -> ReplayResult:
    """Replay ``stream`` (default: the whole corpus) and return the alert log.

    A session opens at each crash report and is updated each minute for two
    hours or until ``stream_end``. Each update builds the window vectors
    anchored at the current minute for the crash segment and up to five
    upstream segments, scores them with both SC models, reuses the crash's
    PC score, and appends an alert whenever the hybrid probability exceeds
    ``alert_threshold``.
    """
    engine = ReplayEngine(corpus, bundle, alert_threshold, extractor, speed, keep_scores)
    events = corpus_stream(corpus) if stream is None else stream
    for ev in events:
        engine.feed(ev)
    end = stream_end if stream_end is not None else max(corpus.t_end, getattr(engine, "_last_time", corpus.t0))
    return engine.finish(end)
