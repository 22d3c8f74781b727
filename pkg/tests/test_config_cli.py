from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from sentinel.cli import main
from sentinel.config import load_config, validate_config
from sentinel.embed import API_KEY_ENV
from sentinel.errors import ConfigError, StageError
from sentinel.runner import determinism_hash, full_run
from sentinel.synth import SynthConfig, write_synth

SMALL_SYNTH = SynthConfig(n_groups=2, n_days=60, seed=2)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("synth")
    write_synth(d, SMALL_SYNTH)
    return d


def config_text(data: Path, out: Path, extra: str = "") -> str:
    return f"""
[paths]
groups_dir = {data / 'groups'}
events = {data / 'events.csv'}
out_dir = {out}

[graph]
hidden = 8
embed = 4
epochs = 40

[forest]
n_trees = 11

[run]
n_seeds = 2
top_n = 10
{extra}
"""


# --- config validation --------------------------------------------------------

def test_defaults(data_dir, tmp_path):
    cfg = validate_config(config_text(data_dir, tmp_path / "out"))
    assert cfg.ratio == 0.7 and cfg.split_kind == "stratified" and cfg.graph.aggregator == "typed"
    assert cfg.seeds == [0, 1] and cfg.forest.n_trees == 11 and cfg.provider.dim == 32


def test_bad_learning_rate(data_dir, tmp_path):
    with pytest.raises(ConfigError) as exc:
        validate_config(config_text(data_dir, tmp_path, "").replace("epochs = 40", "epochs = 40\nlearning_rate = -0.1"))
    assert exc.value.errors == ["learning_rate must be > 0"]


def test_all_errors_reported_together(data_dir, tmp_path):
    text = config_text(data_dir, tmp_path).replace("hidden = 8", "hidden = 0").replace("n_trees = 11", "n_trees = 10")
    text += "\n[mystery]\nx = 1\n"
    with pytest.raises(ConfigError) as exc:
        validate_config(text)
    assert set(exc.value.errors) == {"hidden must be >= 1", "n_trees must be a positive odd integer", "unknown section [mystery]"}


def test_unknown_key_and_missing_paths(tmp_path):
    with pytest.raises(ConfigError) as exc:
        validate_config("[paths]\nevents = nope.csv\n[graph]\nhiden = 3\n", base_dir=tmp_path)
    errs = exc.value.errors
    assert "[graph] unknown key 'hiden'" in errs
    assert "[paths] groups_dir is required" in errs and "[paths] out_dir is required" in errs
    assert any(e.startswith("[paths] events: file not found") for e in errs)


def test_relative_paths_resolve_against_config_file(data_dir, tmp_path):
    cfg_path = data_dir / "run.ini"
    cfg_path.write_text("[paths]\ngroups_dir = groups\nevents = events.csv\nout_dir = out\n")
    cfg = load_config(cfg_path)
    assert cfg.groups_dir == data_dir / "groups" and cfg.out_dir == data_dir / "out"


def test_env_key_overrides_file_and_is_not_echoed(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-from-env-123")
    cfg = validate_config(config_text(data_dir, tmp_path, "[provider]\nkind = remote\napi_key = sk-from-file-456\n"))
    assert cfg.api_key == "sk-from-env-123"
    assert "sk-from" not in repr(cfg) and "sk-from" not in json.dumps(cfg.hyperparameters())


def test_missing_events_fails_before_work(data_dir, tmp_path):
    cfg = validate_config(config_text(data_dir, tmp_path / "out"))
    cfg = cfg.__class__(**{**cfg.__dict__, "events": tmp_path / "gone.csv"})
    with pytest.raises(StageError) as exc:
        full_run(cfg)
    assert exc.value.stage == "validate" and exc.value.exit_code == 3
    assert not (tmp_path / "out" / "ingest").exists()


# --- full run -----------------------------------------------------------------

@pytest.fixture(scope="module")
def report(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return full_run(validate_config(config_text(data_dir, out / "a"))), out / "a"


def test_full_run_report(report):
    rep, out = report
    assert set(rep["metrics"]) == {"text", "hybrid", "tfidf"}
    for block in rep["metrics"].values():
        assert len(block["per_seed"]) == 2 and set(block["median"]) == {"precision", "recall", "f1", "accuracy"}
    assert sorted(rep["ordering"]) == ["hybrid", "text", "tfidf"]
    assert rep["schema_version"] == "1.0" and rep["determinism_hash"] == determinism_hash(rep)
    assert rep["class_balance"]["positive_days"] + rep["class_balance"]["negative_days"] == rep["volumes"]["days"]
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk["determinism_hash"] == rep["determinism_hash"]
    for name in ("comparison.csv", "matrix.bin", "labels.csv", "seed_0/metrics.json", "analysis/cooc.dot",
                 "analysis/tfidf.csv", "analysis/coordination.csv", "analysis/drift.csv"):
        assert (out / name).is_file(), name
    assert (out / "comparison.csv").read_text().splitlines()[0].startswith("model")


def test_report_never_contains_key(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-secret-never-written")
    rep = full_run(validate_config(config_text(data_dir, tmp_path / "o", "[provider]\napi_key = sk-file-secret\n")))
    for p in (tmp_path / "o").rglob("*"):
        if p.is_file():
            data = p.read_bytes()
            assert b"sk-secret" not in data and b"sk-file" not in data, p
    assert "sk-" not in json.dumps(rep)


# --- CLI ----------------------------------------------------------------------

def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[graph]\nlearning_rate = 0\n")
    assert main(["run", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "learning_rate must be > 0" in err["errors"]


def test_cli_data_error_exit_3(tmp_path, capsys):
    (tmp_path / "groups").mkdir()
    (tmp_path / "events.csv").write_text("no,date,columns\n1,2,3\n")
    code = main(["ingest", "--groups-dir", str(tmp_path / "groups"), "--events", str(tmp_path / "events.csv"),
                 "--out", str(tmp_path / "out")])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["exit_code"] == 3


def test_cli_provider_error_exit_5(data_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    assert main(["ingest", "--groups-dir", str(data_dir / "groups"), "--events", str(data_dir / "events.csv"),
                 "--out", str(tmp_path / "ing")]) == 0
    capsys.readouterr()
    code = main(["embed", "--corpus", str(tmp_path / "ing"), "--provider", "remote", "--cache", str(tmp_path / "c.bin")])
    assert code == 5
    assert json.loads(capsys.readouterr().err)["exit_code"] == 5
    assert not (tmp_path / "c.bin").exists()


def _stages(data: Path, out: Path) -> list[list[str]]:
    return [
        ["ingest", "--groups-dir", str(data / "groups"), "--events", str(data / "events.csv"), "--out", str(out / "ing")],
        ["embed", "--corpus", str(out / "ing"), "--cache", str(out / "emb.bin")],
        ["fuse", "--cache", str(out / "emb.bin"), "--events", str(out / "ing"), "--out", str(out / "m.bin")],
        ["split", "--labels", str(out / "m.labels.csv"), "--seed", "3", "--out", str(out / "split.json")],
        ["train-graph", "--matrix", str(out / "m.bin"), "--labels", str(out / "m.labels.csv"), "--mask",
         str(out / "split.json"), "--hidden", "8", "--embed", "4", "--epochs", "30", "--seed", "3", "--out", str(out / "g.bin")],
        ["evaluate", "--features", "text,hybrid,tfidf", "--matrix", str(out / "m.bin"), "--graph-embeds",
         str(out / "g.npy"), "--corpus", str(out / "ing"), "--mask", str(out / "split.json"), "--seed", "3",
         "--trees", "11", "--out", str(out / "metrics.json"), "--comparison", str(out / "cmp.csv")],
    ]


def test_stage_isolation_rerun_is_identical(data_dir, tmp_path, capsys):
    out = tmp_path / "stages"
    out.mkdir()
    for argv in _stages(data_dir, out):
        assert main(argv) == 0, argv
    first = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert len(json.loads(first["metrics.json"])) == 3
    # delete one stage's outputs at a time and rerun only that stage
    for argv in _stages(data_dir, out)[1:]:
        target = Path(argv[argv.index("--out") + 1] if "--out" in argv else argv[argv.index("--cache") + 1])
        target.unlink()
        assert main(argv) == 0, argv
    second = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second


def test_synth_cli_and_module_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sentinel", "synth", "--groups", "2", "--days", "40", "--seed", "4",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["groups"] == 2
    assert (tmp_path / "manifest.json").is_file() and len(list((tmp_path / "groups").glob("*.json"))) == 2


def test_synth_cli_bad_config_exit_2(tmp_path, capsys):
    assert main(["synth", "--days", "5", "--out", str(tmp_path)]) == 2
    assert "n_days must be >= 30" in json.loads(capsys.readouterr().err)["errors"]


def test_analyze_cli(data_dir, tmp_path, capsys):
    assert main(["ingest", "--groups-dir", str(data_dir / "groups"), "--events", str(data_dir / "events.csv"),
                 "--out", str(tmp_path / "ing")]) == 0
    for kind, name in (("volume", "v.csv"), ("cooc", "g.dot"), ("tfidf", "t.csv"), ("coordination", "c.csv"), ("drift", "d.csv")):
        assert main(["analyze", kind, "--corpus", str(tmp_path / "ing"), "--out", str(tmp_path / name)]) == 0, kind
    assert (tmp_path / "t_top.csv").is_file()
    assert (tmp_path / "c.csv").read_text().startswith("week_start,nodes,edges,density")
    assert main(["analyze", "volume", "--corpus", str(tmp_path / "ing"), "--events", str(tmp_path / "ing"),
                 "--out", str(tmp_path / "ev.csv")]) == 0
