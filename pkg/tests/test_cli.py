import json

import pandas as pd
import pytest

from helpers import write_case
from scopf_proxy.cli import main
from scopf_proxy.core.runner import load_demand_file

RADIAL = """function mpc = case2_radial
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	0	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	0	0	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	1	0	100	0	0	0	0	1;
];
mpc.gencost = [
	2	0	0	3	0.0001	0.01	0;
];
"""


def _read(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_solve_dcopf_writes_summary_and_manifest(tmp_path, capsys):
    assert main(["solve", "--case", "case3_triangle", "--out", str(tmp_path)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["ok"] and printed["command"] == "solve"

    summary = _read(tmp_path / "summary.json")
    assert summary["objective"] == pytest.approx(1.875, rel=1e-6)
    assert summary["binding"] == []
    dispatch = pd.read_csv(tmp_path / "dispatch.csv")
    assert dispatch["p_mw"].tolist() == pytest.approx([75.0, 25.0], abs=1e-5)

    manifest = _read(tmp_path / "manifest.json")
    assert manifest["command"] == "solve"
    assert manifest["seed"] == 0
    assert len(manifest["config_hash"]) == 64
    assert (tmp_path / "config.resolved.toml").is_file()


def test_solve_scdcopf_commits_expensive_unit(tmp_path):
    assert main(["solve", "--kind", "scdcopf", "--case", "case3_ramp", "--fraction", "1", "--out", str(tmp_path)]) == 0
    summary = _read(tmp_path / "summary.json")
    assert summary["contingencies"] == [1, 2, 3]
    assert summary["shed_cost"] == pytest.approx(0.0, abs=1e-4)
    dispatch = pd.read_csv(tmp_path / "dispatch.csv")
    assert dispatch["p_pu"].tolist() == pytest.approx([0.7, 0.2, 0.1], abs=1e-6)


def test_demand_file_overrides_case_loads(tmp_path):
    demand = tmp_path / "demand.csv"
    demand.write_text("bus_id,demand_pu\n3,0.8\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["solve", "--case", "case3_triangle", "--demand", str(demand), "--out", str(out)]) == 0
    # p = (0.65, 0.15) balances 0.8 p.u. at equal marginal cost
    assert _read(out / "summary.json")["objective"] == pytest.approx(1.395, rel=1e-6)


def test_demand_file_with_unknown_bus_fails(tmp_path):
    demand = tmp_path / "demand.csv"
    demand.write_text("bus_id,demand_pu\n9,0.8\n", encoding="utf-8")
    assert main(["solve", "--case", "case3_triangle", "--demand", str(demand), "--out", str(tmp_path)]) == 2
    assert _read(tmp_path / "error.json")["error"]["code"] == "UNKNOWN_BUS"


def test_scdcopf_without_contingencies_writes_error(tmp_path):
    case = write_case(tmp_path, RADIAL, "case2_radial.m")
    out = tmp_path / "out"
    assert main(["solve", "--kind", "scdcopf", "--case", str(case), "--out", str(out)]) == 2
    error = _read(out / "error.json")
    assert error == {"ok": False, "error": error["error"]}
    assert error["error"]["code"] == "EMPTY_CONTINGENCY_SET"


def test_invalid_flag_value_is_a_config_error(tmp_path):
    assert main(["screen", "--case", "case3_triangle", "--fraction", "2", "--out", str(tmp_path)]) == 2
    error = _read(tmp_path / "error.json")["error"]
    assert error["code"] == "CONFIG_INVALID"
    assert [e["field"] for e in error["details"]["errors"]] == ["contingency_fraction"]


def test_sampling_commands_require_a_seed(tmp_path):
    assert main(["dataset", "--case", "case3_triangle", "--out", str(tmp_path)]) == 2
    fields = [e["field"] for e in _read(tmp_path / "error.json")["error"]["details"]["errors"]]
    assert "seed" in fields


def test_missing_case_is_reported(tmp_path):
    assert main(["parse", "--case", "no_such_case", "--out", str(tmp_path)]) == 2
    fields = [e["field"] for e in _read(tmp_path / "error.json")["error"]["details"]["errors"]]
    assert fields == ["case_path"]


def test_parse_and_ptdf_outputs(tmp_path):
    assert main(["parse", "--case", "case3_triangle", "--out", str(tmp_path)]) == 0
    network = _read(tmp_path / "network.json")
    assert [b["id"] for b in network["buses"]] == [1, 2, 3]

    assert main(["ptdf", "--case", "case3_triangle", "--out", str(tmp_path)]) == 0
    ptdf = pd.read_csv(tmp_path / "ptdf.csv")
    assert list(ptdf.columns) == ["line_id", "bus1", "bus2", "bus3"]
    assert ptdf["bus1"].tolist() == [0.0, 0.0, 0.0]


def test_screen_writes_contingencies_and_model_size(tmp_path):
    assert main(["screen", "--case", "case3_ramp", "--fraction", "1", "--out", str(tmp_path)]) == 0
    assert _read(tmp_path / "contingencies.json")["line_ids"] == [2, 3, 1]
    size = pd.read_csv(tmp_path / "model_size.csv")
    assert size["system"].tolist() == ["case3_ramp"]


def test_dataset_is_reproducible_from_seed(tmp_path):
    args = ["dataset", "--case", "case3_triangle", "--seed", "3", "--n-samples", "4", "--unlabeled"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.csv").read_bytes()
    assert a == (tmp_path / "b" / "dataset.csv").read_bytes()
    assert main(["dataset", "--case", "case3_triangle", "--seed", "4", "--n-samples", "4", "--unlabeled", "--out", str(tmp_path / "c")]) == 0
    assert a != (tmp_path / "c" / "dataset.csv").read_bytes()


@pytest.mark.slow
def test_train_then_eval_round_trip(tmp_path):
    common = ["--case", "case3_ramp", "--seed", "1", "--fraction", "1", "--out", str(tmp_path)]
    assert main(["train", *common, "--mode", "self", "--epochs", "2", "--n-samples", "2", "--lr", "0.01"]) == 0
    assert (tmp_path / "checkpoints" / "self.json").is_file()
    log = (tmp_path / "train_log_self.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(log) == 2

    assert main(["eval", *common, "--eval-samples", "2"]) == 0
    report = _read(tmp_path / "report.json")
    assert [a["model"] for a in report["aggregates"]] == ["self", "untuned"]
    assert (tmp_path / "cost_errors.csv").is_file()
    assert (tmp_path / "scatter.csv").is_file()


def test_flags_alone_are_a_complete_config(tmp_path):
    assert main(["parse", "--case", "case3_triangle", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "network.json").is_file()
    assert not (tmp_path / "error.json").exists()


def test_demand_file_keeps_every_digit(tri, tmp_path):
    demand = tmp_path / "demand.csv"
    values = [0.1 + 0.2, 1 / 3]
    demand.write_text(f"bus_id,demand_pu\n2,{values[0]!r}\n3,{values[1]!r}\n", encoding="utf-8")
    loaded = load_demand_file(tri, demand)
    assert loaded[1] == values[0]
    assert loaded[2] == values[1]
