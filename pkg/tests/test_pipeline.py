import numpy as np
import pytest

from builders import T0, make_corpus
from seccrash.corpus import parse_ts
from seccrash.pipeline import (
    BinArrival,
    CrashEvent,
    ReplayEngine,
    ReplayError,
    corpus_stream,
    open_session,
    read_alerts,
    replay,
    session_minutes,
)

DAY = 86400


def _head(corpus, days):
    end = corpus.t0 + days * DAY
    return [ev for ev in corpus_stream(corpus) if ev.time < end], end


def test_full_and_truncated_sessions():
    corpus = make_corpus(np.full((10, 288), 60.0), [("C", 8, T0 + 3600)])
    s = open_session(corpus, corpus.crashes[0])
    assert session_minutes(s) == 120
    assert len(s.watched) == 6 and s.watched[:2] == [8, 7] and not s.boundary
    assert session_minutes(s, T0 + 3600 + 30 * 60) == 30


def test_boundary_session_watches_fewer_segments():
    corpus = make_corpus(np.full((10, 288), 60.0), [("C", 3, T0 + 3600)])
    s = open_session(corpus, corpus.crashes[0])
    assert session_minutes(s) == 120
    assert s.watched == [3, 2, 1, 0] and s.boundary


def test_stream_is_time_ordered(small_synth):
    events, _ = _head(small_synth.corpus, 2)
    times = [e.time for e in events]
    assert times == sorted(times)
    assert any(isinstance(e, CrashEvent) for e in events)


def test_no_crashes_no_alerts(small_bundle):
    corpus = make_corpus(np.full((12, 288), 60.0))
    assert replay(corpus, small_bundle, 0.0).alerts == []


def test_out_of_order_events_raise(small_synth, small_bundle):
    engine = ReplayEngine(small_synth.corpus, small_bundle)
    engine.feed(BinArrival(small_synth.corpus.t0 + 600))
    with pytest.raises(ReplayError, match="out-of-order"):
        engine.feed(BinArrival(small_synth.corpus.t0 + 300))


@pytest.fixture(scope="module")
def two_days(small_synth, small_bundle):
    events, end = _head(small_synth.corpus, 2)
    return replay(small_synth.corpus, small_bundle, 0.5, stream=events, stream_end=end, keep_scores=True), end


def test_alerts_stay_inside_their_sessions(two_days):
    result, end = two_days
    assert result.alerts
    start = {s.crash_id: s.start for s in result.sessions}
    for a in result.alerts:
        assert a.hybrid_prob > a.threshold
        assert 0 <= a.minute < 120
        t = parse_ts(a.emitted_at)
        assert start[a.crash_id] <= t < start[a.crash_id] + 7200 and t < end


def test_sessions_update_every_minute_over_at_most_six_segments(two_days):
    result, end = two_days
    for s in result.sessions:
        assert len(s.watched) <= 6
        assert s.updates_run == session_minutes(s, end)


def test_every_score_above_threshold_alerts_at_its_segment(two_days, small_synth):
    result, _ = two_days
    geometry = small_synth.corpus.geometry
    alerted = {(a.crash_id, a.segment_id, a.minute) for a in result.alerts}
    starts = {s.crash_id: s.start for s in result.sessions}
    for t, cid, seg, prob, *_ in result.scores:
        if prob > 0.5:
            assert (cid, geometry[seg].segment_id, (t - starts[cid]) // 60) in alerted


def test_replay_log_is_byte_identical(small_synth, small_bundle, tmp_path):
    events, end = _head(small_synth.corpus, 1)
    for name in ("a", "b"):
        replay(small_synth.corpus, small_bundle, 0.5, stream=events, stream_end=end).write(tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert read_alerts(tmp_path / "a") == replay(small_synth.corpus, small_bundle, 0.5, stream=events,
                                                 stream_end=end).alerts
