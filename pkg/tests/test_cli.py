import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import json

import pandas as pd
import pytest

from topodispatch.cli import build_parser, main

SMALL = """\
name: small
profiles: {kind: synthetic, seed: 0, n_days: 2, horizon: 4}
evaluation: {days: [0, 1], oracle: %s}
oracle: {n_starts: 1, iterations: 3}
td3:
  episodes: 2
  batch: 2
  warmup_steps: 2
  network: {variant: nn, hidden: 4, mlp_width: 6}
"""


def _config(tmp_path, oracle: bool = True):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL % ("true" if oracle else "false"))
    return str(path)


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_config_errors_exit_2(tmp_path):
    assert main(["evaluate", "--variant", "gin", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == 2


def test_unknown_topology_case_exits_3(tmp_path):
    code = main(["evaluate", "--config", _config(tmp_path), "--topology", "TP99", "--out", str(tmp_path)])
    assert code == 3


def test_evaluate_then_report_agree(tmp_path):
    out = tmp_path / "runs"
    code = main(
        ["evaluate", "--config", _config(tmp_path), "--policy", "random:1", "--out", str(out)]
    )
    assert code == 0
    run = out / "small" / "evaluate"
    metrics = pd.read_csv(run / "metrics.csv")
    assert metrics["policy"].tolist() == ["zero", "random_1"]
    assert metrics["saved_cost_usd"].iloc[0] == 0.0
    assert "exec_time_s" not in metrics.columns
    assert "exec_time_s" in pd.read_csv(run / "timing.csv").columns

    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["exit_code"] == 0
    assert "metrics.csv" in manifest["artifacts"]
    assert "oracle.csv" in manifest["artifacts"]
    assert len(manifest["config_hash"]) == 64

    assert main(["report", str(run), "--out", str(tmp_path / "report")]) == 0
    report = pd.read_csv(tmp_path / "report" / "report.csv")
    pd.testing.assert_frame_equal(report, metrics)


def test_report_without_episode_index(tmp_path):
    assert main(["report", str(tmp_path)]) == 3


def test_suite_records_missing_checkpoints(tmp_path):
    out = tmp_path / "runs"
    code = main(
        [
            "suite",
            "--config",
            _config(tmp_path, oracle=False),
            "--policy",
            str(tmp_path / "never_trained"),
            "--out",
            str(out),
        ]
    )
    assert code == 3
    run = out / "small" / "suite"
    suite = pd.read_csv(run / "suite.csv")
    assert suite["target"].tolist() == ["TP1", "TP2", "TP3", "TP4", "TP5", "TP6", "TP7"]
    assert set(suite["status"]) == {"ok"}
    assert pd.read_csv(run / "missing.csv")["source"].tolist() == [str(tmp_path / "never_trained")]


@pytest.mark.integration
def test_train_then_evaluate_checkpoint(tmp_path):
    out = tmp_path / "runs"
    cfg = _config(tmp_path, oracle=False)
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    seed_dir = out / "small" / "train" / "seed_0"
    log = pd.read_csv(seed_dir / "training_log.csv")
    assert log["episode"].tolist() == [0, 1]
    assert "wall_time" not in log.columns
    assert "wall_time_s" in pd.read_csv(out / "small" / "train" / "timing.csv").columns
    ckpt = seed_dir / "checkpoints" / "final"
    assert main(["evaluate", "--config", cfg, "--policy", str(ckpt), "--out", str(out)]) == 0
    metrics = pd.read_csv(out / "small" / "evaluate" / "metrics.csv")
    assert metrics["policy"].tolist() == ["zero", "nn_seed_0"]
    assert "accuracy_vs_baseline_policy_pct" in metrics.columns


@pytest.mark.integration
def test_validate_and_oracle_validation(tmp_path):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    checks = pd.read_csv(tmp_path / "experiment" / "validate" / "validation.csv")
    assert checks["passed"].all()
    assert main(["oracle", "--validate", "--out", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "experiment" / "oracle" / "oracle_validation.csv")
    assert frame["agrees"].all()


def test_evaluate_rerun_is_byte_identical(tmp_path):
    cfg = _config(tmp_path, oracle=False)
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["evaluate", "--config", cfg, "--policy", "random:2", "--out", str(out)]) == 0
        runs.append(out / "small" / "evaluate")
    files = sorted(
        p.relative_to(runs[0]) for p in runs[0].rglob("*.csv") if p.name != "timing.csv"
    )
    assert files
    for rel in files:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()
