import csv
import json
import subprocess
import sys

import pytest

from jointsurv.cli import main
from jointsurv.io import read_config

FAST = ["--chains", "2", "--iters", "120", "--burnin", "40"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root, skip=()):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("simulate", "--out", out, "--n-patients", 60, "--seed", 5) == 0
    return out


@pytest.fixture(scope="module")
def joint_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("joint")
    assert run("fit", "--data", data_dir, "--out", out, "--seed", 1, *FAST) == 0
    return out


@pytest.fixture(scope="module")
def two_stage_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("two_stage")
    assert run("fit-two-stage", "--data", data_dir, "--out", out, "--seed", 1, *FAST) == 0
    return out


def test_simulate_outputs(data_dir):
    for name in ("longitudinal.csv", "survival.csv", "truth.csv", "config.txt"):
        assert (data_dir / name).exists()
    assert len(read_csv(data_dir / "survival.csv")) == 60
    cfg = read_config(data_dir / "config.txt")
    assert cfg["seed"] == "5" and cfg["command"] == "simulate"


def test_simulate_with_calibration(tmp_path):
    assert run("simulate", "--out", tmp_path, "--n-patients", 30, "--target-event-fraction", 0.6) == 0


def test_fit_outputs_and_determinism(tmp_path, data_dir, joint_dir):
    meta = json.loads((joint_dir / "model.json").read_text())
    assert meta["n_chains"] == 2
    assert len(read_csv(joint_dir / "chain_1.csv")) == 80
    diag = json.loads((joint_dir / "diagnostics.json").read_text())
    assert "alpha" in diag["parameters"]
    again = tmp_path / "again"
    assert run("fit", "--data", data_dir, "--out", again, "--seed", 1, *FAST) == 0
    assert tree_bytes(again, skip=("config.txt",)) == tree_bytes(joint_dir, skip=("config.txt",))


def test_fit_two_stage_outputs(two_stage_dir):
    assert (two_stage_dir / "stage1_chain_1.csv").exists()
    assert (two_stage_dir / "stage2_chain_2.csv").exists()
    assert len(read_csv(two_stage_dir / "b_hat.csv")) == 60


@pytest.mark.parametrize("which", ["joint", "two_stage"])
def test_predict(tmp_path, data_dir, joint_dir, two_stage_dir, which):
    fit = joint_dir if which == "joint" else two_stage_dir
    assert run("predict", "--fit", fit, "--data", data_dir, "--out", tmp_path,
               "--landmarks", "1", "--horizons", "1,2,3", "--ids", "P00,P01,P02,P03", "--predict-draws", 20) == 0
    files = sorted(tmp_path.glob("pred_*.csv"))
    assert 1 <= len(files) <= 4
    rows = read_csv(files[0])
    assert [float(r["horizon"]) for r in rows] == [1.0, 2.0, 3.0]
    assert float(rows[0]["mean"]) == 1.0
    means = [float(r["mean"]) for r in rows]
    assert means == sorted(means, reverse=True)


def test_evaluate_models(tmp_path, data_dir, joint_dir, two_stage_dir):
    assert run("evaluate", "--data", data_dir, "--joint", joint_dir, "--two-stage", two_stage_dir,
               "--out", tmp_path, "--predict-draws", 20) == 0
    rows = read_csv(tmp_path / "metrics.csv")
    got = {(r["model"], r["metric"]) for r in rows}
    for model in ("joint", "two_stage"):
        for metric in ("auc_1", "auc_3", "auc_5", "brier_1", "brier_3", "brier_5", "ibs"):
            assert (model, metric) in got


def test_evaluate_oracle_predictions(tmp_path, data_dir):
    surv = read_csv(data_dir / "survival.csv")
    pred = tmp_path / "oracle.csv"
    with open(pred, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "horizon", "survival"])
        for r in surv:
            for u in (1.0, 3.0):
                w.writerow([r["id"], u, float(float(r["event_time"]) > u)])
    out = tmp_path / "eval"
    assert run("evaluate", "--data", data_dir, "--predictions", pred, "--horizons", "1,3", "--out", out) == 0
    rows = {r["metric"]: float(r["value"]) for r in read_csv(out / "metrics.csv")}
    assert rows["brier_1"] == 0.0 and rows["brier_3"] == 0.0
    assert rows["auc_1"] == 1.0 and rows["auc_3"] == 1.0


def test_diagnose(tmp_path, joint_dir, two_stage_dir):
    assert run("diagnose", "--fit", joint_dir, "--out", tmp_path / "j") == 0
    assert run("diagnose", "--fit", two_stage_dir, "--out", tmp_path / "t") == 0
    report = json.loads((tmp_path / "j" / "diagnostics.json").read_text())
    assert report["parameters"]["beta0"]["rhat"] > 0


REPLICATE = ["--replications", 2, "--n-patients", 40, "--chains", 2, "--iters", 80, "--burnin", 30,
             "--predict-draws", 20, "--seed", 3]


def test_replicate_deterministic_and_parallel_safe(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run("replicate", "--out", a, *REPLICATE) == 0
    assert run("replicate", "--out", b, *REPLICATE) == 0
    assert run("replicate", "--out", c, "--workers", 2, *REPLICATE) == 0
    assert tree_bytes(a, skip=("config.txt",)) == tree_bytes(b, skip=("config.txt",))
    assert tree_bytes(a, skip=("config.txt",)) == tree_bytes(c, skip=("config.txt",))
    recovery = read_csv(a / "recovery.csv")
    assert {r["parameter"] for r in recovery} == {"beta0", "beta1", "gamma_1", "alpha", "sigma2", "tau2"}
    assert {r["model"] for r in recovery} == {"joint", "two_stage"}
    assert {r["metric"] for r in read_csv(a / "accuracy.csv")} >= {"auc_1", "auc_3", "auc_5", "ibs"}


def test_config_file_and_flag_precedence(tmp_path, data_dir):
    cfg = tmp_path / "run.txt"
    cfg.write_text("iters = 90\nburnin = 30\nchains = 1\nseed = 8\n")
    out = tmp_path / "o"
    assert run("fit", "--config", cfg, "--data", data_dir, "--out", out, "--iters", 70) == 0
    resolved = read_config(out / "config.txt")
    assert resolved["iters"] == "70" and resolved["seed"] == "8" and resolved["burnin"] == "30"
    assert len(read_csv(out / "chain_1.csv")) == 40


def test_resolved_config_reproduces_run(tmp_path, data_dir):
    out = tmp_path / "first"
    assert run("fit", "--data", data_dir, "--out", out, "--seed", 2, *FAST) == 0
    cfg = tmp_path / "replay.txt"
    lines = [l for l in (out / "config.txt").read_text().splitlines()
             if not l.startswith(("command", "out"))]
    cfg.write_text("\n".join(lines) + "\n")
    replay = tmp_path / "replay"
    assert run("fit", "--config", cfg, "--out", replay) == 0
    assert tree_bytes(out, skip=("config.txt",)) == tree_bytes(replay, skip=("config.txt",))


def test_errors_exit_nonzero(tmp_path, data_dir, capsys):
    with pytest.raises(SystemExit) as info:
        run("fit", "--bogus", 1)
    assert info.value.code != 0
    assert run("fit", "--data", tmp_path / "missing", "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err
    assert run("fit", "--data", data_dir) == 2
    assert run("predict", "--fit", tmp_path, "--data", data_dir, "--out", tmp_path) == 2
    assert run("fit", "--data", data_dir, "--out", tmp_path, "--iters", "abc") == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("replications = 3\n")
    assert run("fit", "--config", bad, "--data", data_dir, "--out", tmp_path) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "jointsurv.cli", "simulate", "--out", str(tmp_path),
                          "--n-patients", "5"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "simulated 5 patients" in res.stdout
