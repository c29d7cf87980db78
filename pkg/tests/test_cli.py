import json

import pytest
from click.testing import CliRunner

from addlab.cli import default_workers, main
from addlab.dataset import read_packed
from addlab.runlog import file_digest
from addlab.splits import load_manifest
from addlab.training import load_checkpoint, load_result


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()

    def invoke(*args, **kw):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False, **kw)

    return invoke


@pytest.fixture
def o9(run, tmp_path):
    result = run("gen", "--n-max", 9, "--size", 32, "--margin", 1, "--out", "o9.apack")
    assert result.exit_code == 0, result.output
    return tmp_path / "o9.apack"


def test_gen_writes_100_records_and_run_manifest(run, o9):
    assert len(read_packed(o9)) == 100
    doc = json.loads(o9.with_name("o9.apack.run.json").read_text())
    assert doc["outputs"] == {"o9.apack": file_digest(o9)}
    assert doc["command_line"][-2:] == ["--out", "o9.apack"]
    for field in ("config_digest", "seeds", "inputs", "wall_clock_s", "artifact_version"):
        assert field in doc


def test_gen_is_reproducible(run, o9, tmp_path):
    first = o9.read_bytes()
    run("gen", "--n-max", 9, "--size", 32, "--margin", 1, "--out", "again.apack")
    assert (tmp_path / "again.apack").read_bytes() == first


def test_exclusion_split_on_n99(run, tmp_path):
    assert run("gen", "--n-max", 99, "--size", 32, "--margin", 1, "--out", "o99.apack").exit_code == 0
    result = run("split", "--protocol", "exclusion", "--intervals", "33-37,62-68",
                 "--omega", "o99.apack", "--out", "s.json")
    assert result.exit_code == 0
    assert "test 2256" in result.output
    assert len(load_manifest(tmp_path / "s.json").test) == 2256


def test_pipeline_train_eval_reports(run, o9, tmp_path):
    assert run("split", "--protocol", "commutativity", "--seed", 7, "--omega", o9, "--out", "s.json").exit_code == 0
    result = run("train", "--omega", o9, "--split", "s.json", "--out", "c.ckpt", "--epochs", 2, "--seed", 3)
    assert result.exit_code == 0, result.output
    ckpt = load_checkpoint(tmp_path / "c.ckpt")
    assert ckpt.n_max == 9
    preds = load_result(tmp_path / "c.predictions.json")
    assert len(preds.predictions) == 100

    result = run("eval", "--ckpt", "c.ckpt", "--omega", o9, "--split", "s.json", "--out", "e.json")
    assert result.exit_code == 0 and "over 55 keys" in result.output

    assert run("map", "--split", "s.json", "--results", "c.predictions.json", "--out", "m.ppm").exit_code == 0
    assert (tmp_path / "m.ppm").read_bytes().startswith(b"P6\n40 40\n255\n")
    assert run("hist", "--results", "c.predictions.json", "--out", "h.csv").exit_code == 0
    assert run("carry", "--results", "c.predictions.json", "--out", "k.json").exit_code == 0
    assert run("coverage", "--split", "s.json").output.strip().endswith("[0, 18]")

    result = run("probe", "--ckpt", "c.ckpt", "--omega", o9, "--n", 6, "--m", 3, "--top", 5)
    lines = result.output.splitlines()
    assert lines[0].startswith("6+3  true=9") and len(lines) == 7
    for name in ("c.ckpt", "e.json", "m.ppm", "h.csv", "k.json"):
        assert (tmp_path / f"{name}.run.json").exists()


def test_seed_changes_outputs_and_equal_flags_reproduce(run, o9, tmp_path):
    run("split", "--protocol", "uniform", "--test-frac", 0.2, "--omega", o9, "--out", "s.json")
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        run("train", "--omega", o9, "--split", "s.json", "--out", f"{name}.ckpt", "--epochs", 1, "--seed", seed)
    a, b, c = (file_digest(tmp_path / f"{n}.ckpt") for n in "abc")
    assert a == b != c


def test_config_file_defaults_and_cli_precedence(run, o9, tmp_path):
    run("split", "--protocol", "uniform", "--test-frac", 0.2, "--omega", o9, "--out", "s.json")
    (tmp_path / "cfg.json").write_text(json.dumps({"train": {"epochs": 2, "seed": 5}}))
    run("--config", "cfg.json", "train", "--omega", o9, "--split", "s.json", "--out", "a.ckpt")
    assert load_checkpoint(tmp_path / "a.ckpt").epoch == 2
    run("--config", "cfg.json", "train", "--omega", o9, "--split", "s.json", "--out", "b.ckpt", "--epochs", 1)
    assert load_checkpoint(tmp_path / "b.ckpt").epoch == 1


def test_trials_command(run, o9, tmp_path):
    result = run("--workers", 1, "trials", "--omega", o9, "--protocol", "uniform", "--test-frac", 0.2,
                 "--trials", 2, "--epochs", 1, "--out-dir", "out")
    assert result.exit_code == 0, result.output
    out = tmp_path / "out"
    for name in ("t0.split.json", "t1.ckpt", "t1.map.ppm", "trials.csv", "hist.csv", "coverage.json", "run.json"):
        assert (out / name).exists(), name
    assert (out / "trials.csv").read_text().count("\n") == 3


def test_gradcheck_command(run):
    result = run("gradcheck", "--seeds", 2)
    assert result.exit_code == 0 and "PASS" in result.output


def test_domain_error_exit_1(run, o9):
    result = run("split", "--protocol", "random-pair", "--train-frac", 0.9, "--omega", o9)
    assert result.exit_code == 1
    assert result.output.startswith("addlab: error:") or "error" in result.output


def test_corrupt_input_exit_1(run, o9, tmp_path):
    (tmp_path / "bad.apack").write_bytes(b"NOPE" + o9.read_bytes()[4:])
    result = run("split", "--protocol", "commutativity", "--omega", "bad.apack")
    assert result.exit_code == 1


@pytest.mark.parametrize(
    "args",
    [
        ["repro", "exp9"],
        ["gen", "--n-max", "9", "--out", "x.apack", "--bogus"],
        ["gen", "--out", "x.apack"],
        ["split", "--protocol", "exclusion", "--omega", "o9.apack"],
    ],
)
def test_usage_errors_exit_2(run, o9, args):
    assert run(*args).exit_code == 2


def test_workers_env(monkeypatch):
    monkeypatch.setenv("ADDLAB_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("ADDLAB_WORKERS")
    assert default_workers() >= 1
