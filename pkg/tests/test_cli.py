import csv
import io
import json
import shlex

import numpy as np
import pytest

from assistlab.cli import ConfigError, config_hash, main, resolve
from assistlab.game_model import read_jsonl, write_jsonl

from conftest import MOCK, synthetic_games

ENGINE = ["--engine", shlex.join(MOCK), "--movetime-ms", "1", "--samples", "1", "--horizon", "5", "--search-timeout", "20"]


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    lines = [json.loads(x) for x in out.getvalue().splitlines() if x.strip()]
    return code, lines


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Mock-engine run directory taken through every command once."""
    rd = tmp_path_factory.mktemp("pipeline")
    R = ["--run-dir", rd]
    steps = [
        ["gen-data", *R, *ENGINE, "--games", 6, "--seed", 1],
        ["calibrate", *R, "--min-samples", 2, "--horizon", 5, "--compare", "--holdout", 0.3],
        ["fit-uplift", *R, "--horizon", 5, "--bin-width", 5, "--min-di-per-bin", 1],
        ["simulate", *R, "--thresholds", "0.1,0.2", "--runs", 2000, "--horizon", 5],
        ["train-predictors", *R, "--family", "linear-L2", "--budget", 2],
        ["optimize", *R, *ENGINE, "--backend", "engine", "--target", "slacks", "--k", 2, "--init", 2, "--iters", 1,
         "--games-per-eval", 1],
        ["optimize", *R, "--k", 2, "--init", 2, "--iters", 2, "--runs", 1000, "--ordered"],
        ["play", *R, *ENGINE, "--policy", "threshold", "--budget", 2, "--t", "0.141,0.199", "--games", 3],
        ["play", *R, *ENGINE, "--policy", "maxdelta", "--budget", 2, "--games", 2],
        ["play", *R, *ENGINE, "--policy", "random", "--budget", 1, "--games", 2],
        ["play", *R, *ENGINE, "--policy", "threshold", "--budget", 1, "--t", 0.05, "--mode", "hindsight", "--games", 2],
        ["play", *R, *ENGINE, "--budget", 1, "--mode", "oracle", "--games", 1, "--horizon", 3, "--policy", "always"],
        ["report", *R],
    ]
    outputs = {}
    for argv in steps:
        code, lines = run(*argv)
        assert code == 0, (argv, lines)
        outputs.setdefault(argv[0], []).append(lines)
    return rd, outputs


def test_pipeline_artifacts(pipeline):
    rd, outputs = pipeline
    d0, di = read_jsonl(rd / "d0.cal.jsonl"), read_jsonl(rd / "di.cal.jsonl")
    assert len(d0) == 6 and len(di) == 6
    assert all(p.calibrated for r in d0 for p in r.points)
    for name in ("calibration.json", "calibration_compare.json", "banks.json", "uplift.json", "simulate.json",
                 "optimize/trials.jsonl", "optimize/best.json", "predictors/manifest.json"):
        assert (rd / name).exists(), name
    for name in ("calibration.json", "simulate.json", "optimize/best.json"):
        prov = json.loads((rd / name).read_text())["provenance"]
        assert set(prov) >= {"schema_version", "config_hash", "seed"}
    header = json.loads((rd / "d0.jsonl").read_text().splitlines()[0])
    assert header["provenance"]["seed"] == 1
    trials = [json.loads(x) for x in (rd / "optimize/trials.jsonl").read_text().splitlines()]
    assert len(trials) == 4 and all(t["params"] == sorted(t["params"]) for t in trials)


def test_slack_tuning(pipeline):
    rd, outputs = pipeline
    best = outputs["optimize"][0][0]
    assert best["target"] == "slacks" and best["evaluations"] == 3
    assert all(-0.3 <= x <= 0.3 for x in best["best_params"])
    assert run("optimize", "--run-dir", rd, "--target", "slacks")[0] == 2


def test_threshold_play_respects_budget(pipeline):
    rd, _ = pipeline
    ds = read_jsonl(rd / "play/game-threshold-k2.jsonl")
    assert len(ds) == 3 and all(len(r.fired) <= 2 for r in ds)
    summary = json.loads((rd / "play/game-threshold-k2.summary.json").read_text())
    assert summary["games"] == 3 and summary["thresholds"] == [0.141, 0.199]
    oracle = json.loads((rd / "play/oracle-always-k1.summary.json").read_text())
    assert oracle["never_worse"] is True
    hs = [json.loads(x) for x in (rd / "play/hindsight-threshold-k1.hindsight.jsonl").read_text().splitlines()]
    assert all(h["max_result"] >= h["committed_result"] for h in hs)


def test_report_outputs(pipeline):
    rd, outputs = pipeline
    written = outputs["report"][0][0]["written"]
    for stem in ("budget_scores", "calibration_curves", "sim_diagnostics"):
        assert f"{stem}.csv" in written and f"{stem}.svg" in written
    assert "optimize_trials.csv" in written and "optimize_trace.svg" in written
    rows = list(csv.DictReader(open(rd / "report/calibration_curves.csv")))
    assert {r["move"] for r in rows} == {"5", "30"}
    assert all(r["config_hash"] for r in rows)


@pytest.fixture
def sim_dir(tmp_path):
    rng = np.random.default_rng(0)
    write_jsonl(synthetic_games(400, rng), tmp_path / "d0.cal.jsonl")
    write_jsonl(synthetic_games(400, rng, kind="DI", effect=0.1), tmp_path / "di.cal.jsonl")
    assert run("fit-uplift", "--run-dir", tmp_path, "--horizon", 10, "--bin-width", 5)[0] == 0
    return tmp_path


def test_simulate_and_optimize_are_reproducible(sim_dir):
    args = ["--run-dir", sim_dir, "--thresholds", "0.2", "--runs", 100000, "--seed", 7, "--horizon", 10]
    run("simulate", *args)
    first_sim = (sim_dir / "simulate.json").read_bytes()
    run("simulate", *args)
    assert (sim_dir / "simulate.json").read_bytes() == first_sim
    opt = ["optimize", "--run-dir", sim_dir, "--k", 2, "--init", 3, "--iters", 3, "--runs", 2000, "--seed", 5]
    first = run(*opt)[1]
    trials_a = (sim_dir / "optimize/trials.jsonl").read_text()
    second = run(*opt)[1]
    trials_b = (sim_dir / "optimize/trials.jsonl").read_text()
    assert first == second

    def strip(text):
        return [{k: v for k, v in json.loads(x).items() if k != "cost"} for x in text.splitlines()]

    assert strip(trials_a) == strip(trials_b)


def test_exit_codes(tmp_path, sim_dir):
    empty = tmp_path / "empty"
    empty.mkdir()
    R = ["--run-dir", empty]
    assert run("simulate", *R, "--thresholds", "0.2")[0] == 2  # missing banks
    assert run("simulate", "--run-dir", sim_dir)[0] == 2  # thresholds required
    assert run("simulate", "--run-dir", sim_dir, "--thresholds", "0.2", "--runs", -1)[0] == 2
    assert run("report", "--run-dir", tmp_path / "nothing")[0] == 4
    assert run("play", *R, "--engine", "/nonexistent/engine", "--games", 1)[0] == 3
    (empty / "d0.jsonl").write_text("not json\n")
    assert run("calibrate", *R)[0] == 4
    assert run("play", *R, "--policy", "threshold", "--budget", 2, "--t", "0.1", "--calibration", "x.json")[0] == 2
    with pytest.raises(SystemExit):
        main(["simulate", "--runs", "many"])


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 3\nruns: 10\nsimulate:\n  runs: 20\n  horizon: 7\n")
    v = resolve("simulate", {"config": str(cfg)})
    assert (v["seed"], v["runs"], v["horizon"]) == (3, 20, 7)
    v = resolve("simulate", {"config": str(cfg), "runs": 30})
    assert v["runs"] == 30
    cfg.write_text("sede: 3\n")
    with pytest.raises(ConfigError) as err:
        resolve("simulate", {"config": str(cfg)})
    assert err.value.field == "sede"
    cfg.write_text("simulate:\n  runs: lots\n")
    with pytest.raises(ConfigError):
        resolve("simulate", {"config": str(cfg)})
    assert run("simulate", "--config", cfg)[0] == 2
    # settings of other commands are allowed at top level; fast mode means three samples
    cfg.write_text("games: 5\nfast: true\n")
    assert resolve("play", {"config": str(cfg)})["samples"] == 3


def test_config_hash_ignores_run_dir():
    a = resolve("simulate", {"run_dir": "x", "thresholds": [0.1]})
    b = resolve("simulate", {"run_dir": "y", "thresholds": [0.1]})
    assert config_hash("simulate", a) == config_hash("simulate", b)
    assert config_hash("simulate", a) != config_hash("simulate", {**a, "seed": 1})
