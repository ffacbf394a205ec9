import logging

import pytest

from seccrash.contour import classify_corpus
from seccrash.synthgen import ScenarioConfig, generate_corpus

SMALL = dict(segment_count=12, days=28, crash_rate=6, seed=5)


@pytest.fixture(scope="session")
def small_synth():
    logging.getLogger("seccrash").setLevel(logging.ERROR)
    return generate_corpus(ScenarioConfig(**SMALL))


@pytest.fixture(scope="session")
def small_report(small_synth):
    return classify_corpus(small_synth.corpus)


@pytest.fixture(scope="session")
def small_bundle(small_synth, small_report):
    from seccrash.experiment import ExperimentConfig, prepare, run_experiment

    cfg = ExperimentConfig(members=("LogisticRegression", "GradientBoostedTrees"), strategy="mean")
    return run_experiment(prepare(small_synth.corpus, small_report.classifications, cfg), cfg).bundle


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
