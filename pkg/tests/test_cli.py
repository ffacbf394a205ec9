import json

import pytest

from seccrash.cli import main


def _run(capsys, *argv):
    status = main(list(argv))
    out, err = capsys.readouterr()
    return status, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_synth_then_identify(workdir, capsys):
    cfg = workdir / "demo.cfg"
    cfg.write_text("segment_count = 8\ndays = 7\ncrash_rate = 4\n")
    status, out, _ = _run(capsys, "synth", "--config", str(cfg), "--seed", "2", "--out", str(workdir / "corpus"))
    assert status == 0 and json.loads(out)["crashes"] > 0
    status, out, _ = _run(capsys, "identify", "--corpus", str(workdir / "corpus"), "--out", str(workdir / "cls"))
    assert status == 0
    assert (workdir / "cls" / "classifications.csv").exists()
    assert "oracle" in json.loads(out)


def test_train_without_datasets_fails_with_json_error(workdir, capsys):
    status, out, err = _run(capsys, "train", "--datasets", str(workdir / "nope"), "--out", str(workdir / "b"))
    assert status != 0 and out == ""
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == "missing-input" and line["subcommand"] == "train"


def test_unknown_flag_and_missing_subcommand(capsys):
    status, _, err = _run(capsys, "synth", "--bogus")
    assert status == 2 and json.loads(err)["error"] == "usage"
    status, _, err = _run(capsys)
    assert status == 2
