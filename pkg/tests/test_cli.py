import json

import numpy as np
import pytest

from hstcl import cli
from hstcl.tensorkit import ConfigError, EmptyInputError

TINY = {
    "sim": {"n_agents": 20, "n_steps": 2000},
    "splits": {"train": 2, "val": 2, "test": 2},
    "n_change_points": 3,
    "theta": 3,
    "grid_n": 4,
    "agent": {"D": 8, "epochs": 1, "B": 3},
    "system": {"D": 8, "w": 6, "epochs": 1, "B": 3, "kappa": 3},
    "baseline": {"rolling_window": 8},
}


def tiny_config(tmp_path, name="run"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / name)}))
    return path


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    assert cli.main(["run-all", "--config", str(cfg), "-q"]) == 0
    return tmp, cfg


def test_run_all_produces_reports(finished):
    tmp, _ = finished
    out = tmp / "run"
    report = json.loads((out / "seed_0" / "report.json").read_text())
    assert set(report["methods"]) == {"hstcl", "hstcl_agent", "detect"}
    assert len(report["rows"]) == 3 * 2
    for row in report["rows"]:
        assert 0.0 <= row["covering"] <= 1.0
    table = json.loads((out / "comparison.json").read_text())
    assert {r["method"] for r in table} == {"hstcl", "hstcl_agent", "detect"}
    assert (out / "comparison.csv").read_text().startswith("method,f1_mean")


def test_manifests_record_hashes_and_time(finished):
    tmp, _ = finished
    man = json.loads((tmp / "run" / "manifests" / "seed_0" / "label.json").read_text())
    assert man["stage"] == "label" and man["wall_time_s"] >= 0
    assert any(k.endswith("trace.jsonl") for k in man["inputs"])
    assert all(len(h) == 64 for h in man["outputs"].values())


def test_plot_csv_columns(finished):
    tmp, _ = finished
    plots = sorted((tmp / "run" / "seed_0" / "plots").glob("*.csv"))
    assert len(plots) == 3 * 2
    header = plots[0].read_text().splitlines()[0]
    assert header == "t,score,threshold,is_change_point"


def test_rerun_is_byte_identical(finished, tmp_path):
    tmp, _ = finished
    cfg = tiny_config(tmp_path, "again")
    for stage in ("simulate", "label", "train-agent", "score-agents", "coarse-grain",
                  "train-system", "detect", "detect-baseline", "evaluate"):
        assert cli.main([stage, "--config", str(cfg), "-q"]) == 0
    a, b = tmp / "run" / "seed_0", tmp_path / "again" / "seed_0"
    for rel in ("runs/test_1/trace.jsonl", "agent_net.json", "runs/val_0/agent_scores.csv",
                "system_net.json", "detect/hstcl.json", "detect/detect.json", "report.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_missing_upstream_names_the_stage(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert cli.main(["train-agent", "--config", str(cfg), "-q"]) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "DependencyError" and err["run_stage"] == "simulate"


def test_bad_override_is_a_json_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert cli.main(["simulate", "--config", str(cfg), "--set", "agent.w=0", "-q"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_set_override_parses_json_values(tmp_path):
    cfg = cli.load_config(str(tiny_config(tmp_path)), ["agent.D=12", "dataset=pedestrian"], None)
    assert cfg["agent"]["D"] == 12 and cfg["dataset"] == "pedestrian"


def report(theta, methods, dataset="flock"):
    return {"theta": theta, "dataset": dataset,
            "methods": {m: {"f1": f, "covering": c} for m, (f, c) in methods.items()}}


def test_compare_single_report_single_row():
    rows = cli.compare([report(20, {"hstcl": (0.7, 0.6)})])
    assert len(rows) == 1 and rows[0]["f1_mean"] == 0.7 and rows[0]["f1_std"] == 0.0


def test_compare_aggregates_over_seeds():
    rng = np.random.default_rng(0)
    vals = rng.uniform(size=(5, 2, 2))
    reps = [report(20, {"a": tuple(v[0]), "b": tuple(v[1])}) for v in vals]
    rows = {r["method"]: r for r in cli.compare(reps)}
    for k, m in enumerate("ab"):
        assert rows[m]["f1_mean"] == pytest.approx(vals[:, k, 0].mean())
        assert rows[m]["f1_std"] == pytest.approx(vals[:, k, 0].std())
        assert rows[m]["cover_mean"] == pytest.approx(vals[:, k, 1].mean())
        assert rows[m]["cover_std"] == pytest.approx(vals[:, k, 1].std())
        assert rows[m]["n_seeds"] == 5


def test_compare_rejects_bad_input():
    with pytest.raises(EmptyInputError):
        cli.compare([])
    with pytest.raises(ConfigError):
        cli.compare([report(20, {"a": (1, 1)}), report(10, {"a": (1, 1)})])
