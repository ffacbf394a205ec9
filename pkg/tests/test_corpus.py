import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import T0, crash_frame, geometry_frame, make_corpus, traffic_frame, weather_frame
from seccrash.corpus import (
    BINS_PER_DAY,
    IngestError,
    TrafficObservation,
    WeatherRecord,
    aggregate_bins,
    build_baseline,
    corpus_baseline,
    crash_calendar,
    empty_grid,
    format_ts,
    hour_of,
    ingest,
    load_corpus,
    match_weather,
    parse_ts,
    weekday_of,
)
from seccrash.synthgen import ScenarioConfig, bin_profile, generate_corpus


def _obs(speeds, volumes=None, occ=None, seg="S00", t=T0):
    volumes = volumes if volumes is not None else [10.0] * len(speeds)
    occ = occ if occ is not None else [5.0] * len(speeds)
    return [TrafficObservation(seg, t + 30 * k, s, v, o) for k, (s, v, o) in enumerate(zip(speeds, volumes, occ))]


def test_timestamps_round_trip_and_calendar():
    assert format_ts(T0) == "2021-01-04T00:00:00Z"
    assert parse_ts("2021-01-04T00:00:00Z") == T0
    assert parse_ts("2021-01-04T01:00:00+01:00") == T0
    assert weekday_of(T0) == 0 and weekday_of(T0 + 5 * 86400) == 5
    assert hour_of(T0 + 7 * 3600 + 59 * 60) == 7
    with pytest.raises(ValueError):
        parse_ts("04/01/2021 00:00")


# -- ingest ---------------------------------------------------------------


def _frames(n_seg=3, n_bins=12):
    speed = np.full((n_seg, n_bins), 60.0)
    return traffic_frame(speed), crash_frame([("C1", 1, T0 + 900)]), weather_frame(n_seg, 1), geometry_frame(n_seg)


def test_duplicate_order_index_is_an_error():
    tr, cr, we, ge = _frames()
    ge.loc[2, "order_index"] = 1
    with pytest.raises(IngestError, match="duplicate order_index"):
        ingest(tr, cr, we, ge)


def test_out_of_range_occupancy_row_is_rejected_and_counted():
    tr, cr, we, ge = _frames()
    tr.loc[4, "occupancy_pct"] = 140.0
    corpus = ingest(tr, cr, we, ge)
    assert len(corpus.rejections) == 1
    assert corpus.rejections[0].row == 4 and "occupancy" in corpus.rejections[0].reason
    assert len(corpus.tables["traffic"]) == len(tr) - 1


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda tr, cr: tr.__setitem__("timestamp_utc", tr["timestamp_utc"].where(tr.index != 3, "yesterday")),
         "timestamp"),
        (lambda tr, cr: tr.__setitem__("segment_id", tr["segment_id"].where(tr.index != 2, "NOPE")), "unknown segment"),
        (lambda tr, cr: cr.__setitem__("segment_id", "NOPE"), "unknown segment"),
    ],
)
def test_structural_errors_raise(mutate, message):
    tr, cr, we, ge = _frames()
    mutate(tr, cr)
    with pytest.raises(IngestError, match=message):
        ingest(tr, cr, we, ge)


def test_duplicate_observation_is_an_error():
    tr, cr, we, ge = _frames()
    tr = tr._append(tr.iloc[5]).reset_index(drop=True)
    with pytest.raises(IngestError, match="duplicate observation"):
        ingest(tr, cr, we, ge)


def test_synthetic_files_round_trip(tmp_path):
    sc = generate_corpus(ScenarioConfig(segment_count=6, days=2, crash_rate=4, seed=2))
    sc.write(tmp_path)
    loaded = load_corpus(tmp_path)
    assert len(loaded.crashes) == len(sc.corpus.crashes)
    assert loaded.crashes == sc.corpus.crashes
    assert np.array_equal(loaded.grid.values, sc.corpus.grid.values, equal_nan=True)
    assert np.array_equal(loaded.grid.count, sc.corpus.grid.count)
    assert len(loaded.tables["traffic"]) == 6 * 2 * 2880


def test_exported_csv_reingests_identically(tmp_path):
    rng = np.random.default_rng(0)
    corpus = make_corpus(rng.uniform(30, 70, (4, 288)), [("A", 2, T0 + 4000)])
    corpus.write_csv(tmp_path / "a")
    again = load_corpus(tmp_path / "a")
    again.write_csv(tmp_path / "b")
    for name in ("traffic", "crashes", "weather", "geometry"):
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()
    assert np.array_equal(corpus.grid.values, again.grid.values, equal_nan=True)


# -- aggregation ----------------------------------------------------------


def test_constant_speed_bin():
    (b,) = aggregate_bins(_obs([60.0] * 10))
    assert (b.avg_speed, b.std_speed, b.cv_speed, b.sample_count) == (60.0, 0.0, 0.0, 10)


def test_two_point_population_statistics():
    (b,) = aggregate_bins(_obs([50.0, 70.0]))
    assert b.avg_speed == 60.0 and b.std_speed == 10.0
    assert b.cv_speed == pytest.approx(10 / 60)


def test_zero_mean_volume_gives_zero_cv():
    (b,) = aggregate_bins(_obs([60.0, 61.0], volumes=[0.0, 0.0]))
    assert b.avg_volume == 0.0 and b.cv_volume == 0.0


def test_bins_align_to_five_minutes_and_skip_empty_slots():
    obs = _obs([60.0] * 3, t=T0 + 290) + _obs([50.0], t=T0 + 1500)
    bins = aggregate_bins(obs)
    assert [b.bin_start for b in bins] == [T0, T0 + 300, T0 + 1500]
    assert [b.sample_count for b in bins] == [1, 2, 1]


_speeds = st.lists(st.floats(0, 90, allow_nan=False), min_size=1, max_size=10)


@settings(max_examples=60, deadline=None)
@given(_speeds, st.randoms())
def test_aggregation_is_permutation_invariant(speeds, rnd):
    obs = _obs(speeds)
    shuffled = list(obs)
    rnd.shuffle(shuffled)
    assert aggregate_bins(obs) == aggregate_bins(shuffled)


@settings(max_examples=60, deadline=None)
@given(_speeds)
def test_bin_average_within_member_range(speeds):
    (b,) = aggregate_bins(_obs(speeds))
    assert min(speeds) - 1e-9 <= b.avg_speed <= max(speeds) + 1e-9
    assert b.std_speed >= 0


# -- baselines ------------------------------------------------------------


def _grid(speed_by_day: list[float], slot=90, n_seg=1):
    grid = empty_grid(n_seg, T0, len(speed_by_day))
    for d, v in enumerate(speed_by_day):
        grid.values[:, d * BINS_PER_DAY + slot] = v
        grid.count[:, d * BINS_PER_DAY + slot] = 1
    return grid


def test_identical_days_give_zero_spread():
    base = build_baseline(_grid([65.0] * 4), np.zeros((1, 4), bool), ["S00"])
    assert base.mean_speed[0, 90] == 65.0 and base.std_speed[0, 90] == 0.0 and base.day_count[0, 90] == 4


def test_two_days_population_std():
    base = build_baseline(_grid([60.0, 70.0]), np.zeros((1, 2), bool), ["S00"])
    assert base.mean_speed[0, 90] == 65.0 and base.std_speed[0, 90] == 5.0
    assert base.low_confidence[0, 90]


def test_crash_day_is_excluded():
    cal = np.array([[False, True, False, False]])
    clean = build_baseline(_grid([62.0, 62.0, 64.0, 66.0]), cal, ["S00"])
    spiked = build_baseline(_grid([62.0, 5.0, 64.0, 66.0]), cal, ["S00"])
    assert clean.mean_speed[0, 90] == spiked.mean_speed[0, 90] == 64.0
    assert clean.std_speed[0, 90] == spiked.std_speed[0, 90]
    assert spiked.day_count[0, 90] == 3


def test_segment_without_crash_free_days_is_reported():
    base = build_baseline(_grid([60.0, 61.0], n_seg=2), np.array([[True, True], [False, False]]), ["A", "B"])
    assert base.missing_segments == ("A",)
    assert np.isnan(base.mean_speed[0, 90]) and base.mean_speed[1, 90] == 60.5


def test_crash_calendar_marks_envelope_segments():
    speed = np.full((8, 288 * 2), 60.0)
    corpus = make_corpus(speed, [("C", 5, T0 + 86400 - 1800)], miles=0.5)
    cal = crash_calendar(corpus)
    # 2-mile envelope of 0.5-mile segments: crash segment plus 3 upstream
    assert cal[2:6].all() and not cal[:2].any() and not cal[6:].any()


@pytest.mark.parametrize("noise, tol", [(0.0, 0.01), (3.0, 1.0)])
def test_synthetic_baseline_tracks_configured_profile(noise, tol):
    sc = generate_corpus(ScenarioConfig(segment_count=8, days=40, crash_rate=1, noise_std=noise, seed=1))
    base = corpus_baseline(sc.corpus)
    profile = bin_profile(sc.config, sc.corpus.geometry)
    # slots with few crash-free days carry sampling noise of ~1 mph / sqrt(days)
    ok = base.day_count >= 20
    assert ok.mean() > 0.8
    assert np.abs(base.mean_speed[ok] - profile[ok]).max() < tol


# -- weather --------------------------------------------------------------


def _weather(offsets_min):
    return [WeatherRecord("S00", T0 + 3600 + 60 * m, 70, 50, 2, 0, 10, "Clear") for m in offsets_min]


def test_nearest_weather_record():
    assert match_weather("S00", T0 + 3600, _weather([-10, 20])).timestamp == T0 + 3000


def test_weather_tie_goes_to_earlier():
    assert match_weather("S00", T0 + 3600, _weather([15, -15])).timestamp == T0 + 2700


def test_stale_weather_is_missing():
    assert match_weather("S00", T0 + 3600, _weather([-90])) is None
    assert match_weather("S01", T0 + 3600, _weather([0])) is None


def test_weather_table_agrees_with_record_matching():
    corpus = make_corpus(np.full((2, 288), 60.0))
    k = corpus.weather.nearest(0, T0 + 1800)
    assert corpus.weather.times[0][k] == T0  # tie between 00:00 and 01:00
    assert corpus.weather.nearest(0, T0 + 25 * 3600) is None
