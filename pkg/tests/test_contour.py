import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import T0, crash_frame, explicit_baseline, geometry_frame, make_corpus, traffic_frame
from oracles import brute_force_contour, random_contour_case
from seccrash.contour import (
    NORMAL,
    PRIMARY,
    SECONDARY,
    classify_corpus,
    impact_region,
    load_classifications,
    speed_delta,
)
from seccrash.corpus import corpus_baseline, ingest
from seccrash.synthgen import ScenarioConfig, generate_corpus, oracle_compare
from builders import weather_frame

MIN = 60
FLAT_MEAN = np.full((10, 288), 60.0)
FLAT_STD = np.full((10, 288), 4.0)


def _bin(hh, mm):
    return (hh * 60 + mm) // 5


def _wedge(segs, start, stop, value=30.0, n_seg=10):
    speed = FLAT_MEAN[:n_seg].copy()
    for s in segs:
        speed[s, start:stop] = value
    return speed


def _classes(report):
    return {c.crash_id: (c.crash_class, c.paired_primary_id, c.segment_gap) for c in report.classifications}


def test_speed_delta_examples():
    assert speed_delta(40, 60, 8) == -18
    assert speed_delta(59, 60, 8) == 1
    d = speed_delta(60 - 0.25 * 8, 60, 8)
    assert d == 0 and not d < 0


def test_secondary_inside_upstream_wedge():
    speed = _wedge(range(5, 9), _bin(7, 20), _bin(8, 30))
    crashes = [("P", 8, T0 + 7 * 3600 + 20 * MIN), ("S", 5, T0 + 7 * 3600 + 50 * MIN)]
    report = classify_corpus(make_corpus(speed, crashes), explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert _classes(report) == {"P": (PRIMARY, None, None), "S": (SECONDARY, "P", 3)}
    assert report.counts == {PRIMARY: 1, SECONDARY: 1, NORMAL: 0}
    assert report.gap_histogram() == {3: 1}


def test_crash_beyond_two_miles_is_normal():
    speed = _wedge(range(0, 9), _bin(7, 20), _bin(8, 30))
    crashes = [("P", 8, T0 + 7 * 3600 + 20 * MIN), ("S", 2, T0 + 7 * 3600 + 50 * MIN)]
    corpus = make_corpus(speed, crashes, miles=0.5)
    report = classify_corpus(corpus, explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert _classes(report)["S"] == (NORMAL, None, None)
    # the region stops at the envelope: 0.5-mile segments 5..8
    assert {seg for seg, _ in report.regions["P"].cell_keys()} == {"S05", "S06", "S07", "S08"}


def test_crash_in_envelope_without_speed_drop_is_normal():
    speed = _wedge([8], _bin(7, 20), _bin(8, 30))
    crashes = [("P", 8, T0 + 7 * 3600 + 20 * MIN), ("S", 6, T0 + 7 * 3600 + 50 * MIN)]
    report = classify_corpus(make_corpus(speed, crashes), explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert _classes(report)["S"] == (NORMAL, None, None)
    assert _classes(report)["P"] == (NORMAL, None, None)


def test_free_flow_crash_has_empty_region():
    corpus = make_corpus(FLAT_MEAN.copy(), [("P", 4, T0 + 3 * 3600)])
    region = impact_region(corpus.crashes[0], corpus, explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert region.cells == []


def test_recurrent_congestion_is_netted_out():
    slow = FLAT_MEAN.copy()
    slow[:, _bin(7, 0) : _bin(9, 0)] = 35.0  # every day is this slow, so the baseline is too
    corpus = make_corpus(slow.copy(), [("P", 6, T0 + 7 * 3600 + 30 * MIN)])
    region = impact_region(corpus.crashes[0], corpus, explicit_baseline(slow, np.zeros_like(slow)))
    assert region.cells == []


def test_missing_baseline_gives_empty_region():
    speed = _wedge(range(5, 9), _bin(7, 20), _bin(8, 30))
    mean = FLAT_MEAN.copy()
    mean[8] = np.nan
    corpus = make_corpus(speed, [("P", 8, T0 + 7 * 3600 + 20 * MIN)])
    base = explicit_baseline(mean, FLAT_STD)
    base.day_count[8] = 0
    assert impact_region(corpus.crashes[0], corpus, base).cells == []


def test_detached_pocket_is_excluded():
    speed = _wedge([7, 8], _bin(7, 20), _bin(7, 40))
    speed[5, _bin(8, 30) : _bin(8, 40)] = 20.0  # inside the envelope, not connected
    corpus = make_corpus(speed, [("P", 8, T0 + 7 * 3600 + 20 * MIN)])
    region = impact_region(corpus.crashes[0], corpus, explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert {s for s, _ in region.cell_keys()} == {"S07", "S08"}
    assert all(c.delta_speed < 0 for c in region.cells)


def test_earliest_primary_wins_and_chaining_is_recorded():
    speed = _wedge(range(3, 9), _bin(7, 0), _bin(9, 0))
    crashes = [
        ("A", 8, T0 + 7 * 3600 + 2 * MIN),
        ("B", 7, T0 + 7 * 3600 + 20 * MIN),  # inside A's region
        ("C", 5, T0 + 7 * 3600 + 40 * MIN),  # inside both A's and B's regions
    ]
    report = classify_corpus(make_corpus(speed, crashes), explicit_baseline(FLAT_MEAN, FLAT_STD))
    cls = {c.crash_id: c for c in report.classifications}
    assert cls["B"].paired_primary_id == "A" and cls["C"].paired_primary_id == "A"
    assert cls["A"].crash_class == PRIMARY
    assert cls["B"].crash_class == SECONDARY and not cls["B"].has_secondary


def test_same_instant_crashes_do_not_pair():
    speed = _wedge(range(5, 9), _bin(7, 20), _bin(8, 30))
    t = T0 + 7 * 3600 + 22 * MIN
    report = classify_corpus(make_corpus(speed, [("A", 8, t), ("B", 8, t)]), explicit_baseline(FLAT_MEAN, FLAT_STD))
    assert report.counts[SECONDARY] == 0


@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force_oracle(seed):
    speed, missing, crashes, mean, std, miles = random_contour_case(np.random.default_rng(100 + seed))
    S = speed.shape[0]
    tr, cr, ge = traffic_frame(speed, missing=missing), crash_frame(crashes), geometry_frame(S, miles)
    report = classify_corpus(ingest(tr, cr, weather_frame(S, 1), ge), explicit_baseline(mean, std))
    regions, classes = brute_force_contour(tr, cr, ge, mean, std, 288)
    assert {k: v.cell_keys() for k, v in report.regions.items()} == regions
    assert _classes(report) == classes


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(-4, 4))
def test_decisions_are_scale_invariant(seed, power):
    speed, missing, crashes, mean, std, miles = random_contour_case(np.random.default_rng(seed), n_seg=8)
    c = 2.0**power  # exact in binary, so boundary cells keep their sign
    a = classify_corpus(make_corpus(speed, crashes, miles, missing), explicit_baseline(mean, std))
    b = classify_corpus(make_corpus(speed * c, crashes, miles, missing), explicit_baseline(mean * c, std * c))
    assert _classes(a) == _classes(b)
    assert {k: v.cell_keys() for k, v in a.regions.items()} == {k: v.cell_keys() for k, v in b.regions.items()}


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 100), st.floats(1, 100), st.floats(0, 20), st.floats(0.01, 50))
def test_impact_sign_is_positively_homogeneous(s, m, sd, c):
    d = speed_delta(s, m, sd)
    if abs(d) > 1e-9 * max(s, m, sd, 1.0):
        assert (speed_delta(c * s, c * m, c * sd) < 0) == (d < 0)


@pytest.fixture(scope="module")
def sparse_synth():
    return {n: generate_corpus(ScenarioConfig(segment_count=10, days=42, crash_rate=1.5, seed=3, noise_std=n))
            for n in (0.0, 3.0)}


def test_noise_free_regions_equal_truth(sparse_synth):
    sc = sparse_synth[0.0]
    report = classify_corpus(sc.corpus)
    assert sc.truth.impact_cells
    for pid, cells in sc.truth.impact_cells.items():
        assert report.regions[pid].cell_keys() == set(cells)
    oracle = oracle_compare(sc.truth, report.classifications)
    assert oracle.recall == oracle.precision == 1.0


def test_noisy_regions_cover_truth(sparse_synth):
    sc = sparse_synth[3.0]
    report = classify_corpus(sc.corpus)
    for pid, cells in sc.truth.impact_cells.items():
        got = report.regions[pid].cell_keys()
        assert len(set(cells) & got) >= 0.9 * len(cells)


def test_pairing_respects_time_and_direction(small_synth, small_report):
    corpus = small_synth.corpus
    by_id = corpus.crash_by_id()
    pos = corpus.topology.position
    for c in small_report.classifications:
        if c.paired_primary_id:
            p, s = by_id[c.paired_primary_id], by_id[c.crash_id]
            assert p.timestamp < s.timestamp
            assert pos[corpus.seg(p.segment_id)] >= pos[corpus.seg(s.segment_id)]
            assert c.segment_gap >= 0


def test_classification_is_deterministic_and_round_trips(small_synth, small_report, tmp_path):
    again = classify_corpus(small_synth.corpus, corpus_baseline(small_synth.corpus))
    assert again.classifications == small_report.classifications
    small_report.write(tmp_path)
    loaded = load_classifications(tmp_path)
    assert [(c.crash_id, c.crash_class, c.paired_primary_id, c.segment_gap) for c in loaded] == [
        (c.crash_id, c.crash_class, c.paired_primary_id, c.segment_gap) for c in small_report.classifications
    ]
    assert (tmp_path / "cells.csv").read_text().startswith("primary_crash_id,segment_id,bin_start,delta_speed")
