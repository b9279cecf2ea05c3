import json

import pytest

from scopf_proxy.config import GNN_PRESETS, GnnConfig, RunConfig
from scopf_proxy.core.config_manager import config_manager, resolve_case_path
from scopf_proxy.core.errors import ConfigError


def test_packaged_cases_resolve_by_name():
    assert resolve_case_path("case3_triangle").name == "case3_triangle.m"
    assert resolve_case_path("case3_ramp.m").name == "case3_ramp.m"
    assert resolve_case_path("nowhere") is None


def test_gnn_overrides_win_over_preset():
    dims = GnnConfig(preset="paper", heads=4).resolved()
    assert dims["hidden_dims"] == GNN_PRESETS["paper"]["hidden_dims"]
    assert dims["heads"] == 4
    with pytest.raises(ValueError):
        GnnConfig(hidden_dims=(8, 0))


def test_unknown_keys_are_rejected():
    report = config_manager.validate_config({"case_path": "case3_triangle", "seed": 0, "trian": {}})
    assert not report["ok"]
    assert [e["field"] for e in report["errors"]] == ["trian"]


def test_layers_merge_in_order(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"case_path": "case3_triangle", "seed": 5, "rho": 100.0, "train": {"epochs": 7}}), encoding="utf-8")
    cfg = config_manager.load_run_config(path, {"rho": 50.0, "train": {"epochs": None, "lr": 0.01}}, defaults={"seed": 0})
    assert cfg.seed == 5
    assert cfg.rho == 50.0
    assert cfg.train.epochs == 7
    assert cfg.train.lr == 0.01
    assert cfg.case_path.endswith("case3_triangle.m")


def test_preset_sits_below_file_and_flags():
    cfg = config_manager.load_run_config(None, {"case_path": "case3_ramp", "seed": 1, "train": {"epochs": 3}}, preset="desk3")
    assert cfg.contingency_fraction == 1.0
    assert cfg.train.epochs == 3
    assert cfg.train.n_validation == 10
    with pytest.raises(ConfigError) as exc:
        config_manager.preset("huge")
    assert exc.value.code == "UNKNOWN_PRESET"


def test_train_settings_inherit_run_values():
    cfg = RunConfig(case_path="case3_triangle", seed=9, rho=20.0, contingency_fraction=0.5)
    tc = cfg.train_settings()
    assert (tc.seed, tc.rho, tc.contingency_fraction) == (9, 20.0, 0.5)
    assert cfg.eval_seed() == 1009


def test_every_issue_is_listed(tmp_path):
    with pytest.raises(ConfigError) as exc:
        config_manager.load_run_config(None, {"case_path": "missing.m", "seed": 0, "workers": 0, "train": {"labels_path": str(tmp_path / "x.csv")}})
    fields = sorted(e["field"] for e in exc.value.details["errors"])
    assert fields == ["case_path", "train.labels_path", "workers"]
    assert exc.value.exit_code == 2


def test_warnings_do_not_block():
    report = config_manager.validate_config({"case_path": "case3_triangle", "seed": 0, "train": {"lr": 0.5}})
    assert report["ok"]
    assert [w["code"] for w in report["warnings"]] == ["LARGE_LR"]


def test_unreadable_config_file(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = [", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        config_manager.load_raw_config(path)
    assert exc.value.code == "CONFIG_UNREADABLE"
    with pytest.raises(ConfigError) as exc:
        config_manager.load_raw_config(tmp_path / "none.toml")
    assert exc.value.code == "CONFIG_NOT_FOUND"


def test_resolved_toml_reloads_to_same_hash(tmp_path):
    cfg = config_manager.load_run_config(None, {"case_path": "case3_triangle", "seed": 2, "train": {"gnn": {"heads": 3}}})
    path = config_manager.write_config(cfg, tmp_path / "config.resolved.toml")
    again = config_manager.load_run_config(path)
    assert again == cfg
    assert config_manager.config_hash(again) == config_manager.config_hash(cfg)


def test_unset_sections_fall_back_to_defaults():
    flags = {"case_path": "case3_triangle", "seed": None, "train": {"mode": None, "lr": None, "gnn": {"preset": None}}, "eval": {"n_samples": None}}
    assert config_manager.merge_with_defaults({}, flags) == {"case_path": "case3_triangle", "train": {"gnn": {}}, "eval": {}}
    cfg = config_manager.load_run_config(None, flags, defaults={"seed": 0})
    assert cfg.train.mode == "self"
    assert cfg.eval.n_samples == 100
