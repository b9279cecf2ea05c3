import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import tomlkit
from pydantic import ValidationError

from ..config import REPRODUCE_PRESETS, RunConfig
from ..utils.logger import get_logger
from .errors import ConfigError

logger = get_logger("scopf_proxy.config")

CASES_DIR = Path(__file__).resolve().parent.parent / "cases"


def resolve_case_path(value: str) -> Path | None:
    """File path as given, else a packaged case by name (``case3_triangle``)."""
    if not value:
        return None
    path = Path(value)
    if path.is_file():
        return path
    packaged = CASES_DIR / (value if value.endswith(".m") else f"{value}.m")
    if packaged.is_file():
        return packaged
    return None


class ConfigManager:
    def load_raw_config(self, path: str | Path | None) -> dict[str, Any]:
        if path is None:
            return {}
        path = Path(path)
        if not path.is_file():
            raise ConfigError("CONFIG_NOT_FOUND", f"Config file not found: {path}")
        try:
            if path.suffix.lower() == ".toml":
                data = tomlkit.parse(path.read_text(encoding="utf-8")).unwrap()
            else:
                data = json.loads(path.read_text(encoding="utf-8"))
        except Exception as e:
            raise ConfigError("CONFIG_UNREADABLE", f"Cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("CONFIG_UNREADABLE", f"Config {path} must hold a table/object at top level")
        return data

    def merge_with_defaults(self, value: dict[str, Any] | None, *overrides: dict[str, Any] | None) -> dict[str, Any]:
        """Deep merge; later arguments win. Schema defaults are filled in by validation."""
        merged: dict[str, Any] = {}
        for layer in (value, *overrides):
            if isinstance(layer, dict):
                self._deep_update(merged, layer)
        return merged

    @classmethod
    def _deep_update(cls, target: dict[str, Any], incoming: dict[str, Any]):
        for key, v in incoming.items():
            if v is None:
                continue
            if isinstance(v, dict):
                if not isinstance(target.get(key), dict):
                    target[key] = {}
                cls._deep_update(target[key], v)
            else:
                target[key] = copy.deepcopy(v)

    def preset(self, name: str) -> dict[str, Any]:
        if name not in REPRODUCE_PRESETS:
            raise ConfigError("UNKNOWN_PRESET", f"Unknown preset {name!r}; expected one of {sorted(REPRODUCE_PRESETS)}")
        return copy.deepcopy(REPRODUCE_PRESETS[name])

    def _add_issue(self, bucket: list[dict[str, str]], code: str, field: str, message: str):
        bucket.append({"code": code, "field": field, "message": message})

    def validate_config(self, value: dict[str, Any] | None) -> dict[str, Any]:
        errors: list[dict[str, str]] = []
        warnings: list[dict[str, str]] = []
        cfg = value if isinstance(value, dict) else {}

        run: RunConfig | None = None
        try:
            run = RunConfig.model_validate(cfg)
        except ValidationError as e:
            for err in e.errors():
                field = ".".join(str(p) for p in err.get("loc", ())) or "<root>"
                self._add_issue(errors, str(err.get("type", "invalid")).upper(), field, str(err.get("msg", "")))

        # 路径检查与 schema 检查一起列出
        case_path = cfg.get("case_path")
        if isinstance(case_path, str) and case_path and resolve_case_path(case_path) is None:
            self._add_issue(errors, "PATH_NOT_FOUND", "case_path", f"Case file not found: {case_path}")

        train = cfg.get("train") if isinstance(cfg.get("train"), dict) else {}
        labels_path = train.get("labels_path")
        if isinstance(labels_path, str) and labels_path and not Path(labels_path).is_file():
            self._add_issue(errors, "PATH_NOT_FOUND", "train.labels_path", f"Labels file not found: {labels_path}")

        eval_cfg = cfg.get("eval") if isinstance(cfg.get("eval"), dict) else {}
        ckpt_dir = eval_cfg.get("checkpoint_dir")
        if isinstance(ckpt_dir, str) and ckpt_dir and not Path(ckpt_dir).is_dir():
            self._add_issue(errors, "PATH_NOT_FOUND", "eval.checkpoint_dir", f"Checkpoint directory not found: {ckpt_dir}")

        if run is not None:
            if run.train.mode == "self" and run.train.labels_path:
                self._add_issue(
                    warnings, "LABELS_IGNORED", "train.labels_path", "Self-supervised mode never reads labels; file ignored"
                )
            if run.train.lr > 1e-1:
                self._add_issue(warnings, "LARGE_LR", "train.lr", f"Learning rate {run.train.lr} is unusually large")

        ok = not errors
        return {
            "ok": ok,
            "errors": errors,
            "warnings": warnings,
            "normalized": run.model_dump(mode="json") if (ok and run is not None) else None,
        }

    def load_run_config(
        self,
        path: str | Path | None = None,
        overrides: dict[str, Any] | None = None,
        preset: str | None = None,
        defaults: dict[str, Any] | None = None,
    ) -> RunConfig:
        """defaults < preset < config file < overrides; raises ConfigError listing every issue."""
        layers = [defaults or {}, self.preset(preset) if preset else {}, self.load_raw_config(path), overrides or {}]
        merged = self.merge_with_defaults(*layers)
        report = self.validate_config(merged)
        for w in report["warnings"]:
            logger.warning(f"[Config] {w['field']}: {w['message']}")
        if not report["ok"]:
            summary = "; ".join(f"{e['field']}: {e['message']}" for e in report["errors"])
            raise ConfigError("CONFIG_INVALID", f"Invalid configuration: {summary}", {"errors": report["errors"]})
        run = RunConfig.model_validate(report["normalized"])
        resolved = resolve_case_path(run.case_path)
        return run.model_copy(update={"case_path": str(resolved)})

    @staticmethod
    def _toml_ready(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: ConfigManager._toml_ready(v) for k, v in value.items() if v is not None}
        if isinstance(value, (list, tuple)):
            return [ConfigManager._toml_ready(v) for v in value]
        return value

    def write_config(self, cfg: RunConfig | dict[str, Any], path: str | Path) -> Path:
        data = cfg.model_dump(mode="json") if isinstance(cfg, RunConfig) else cfg
        doc = tomlkit.document()
        doc.add(tomlkit.comment("Resolved configuration echoed by scopf_proxy"))
        ready = self._toml_ready(data)
        # 标量必须写在子表之前
        for key, value in ready.items():
            if not isinstance(value, dict):
                doc[key] = value
        for key, value in ready.items():
            if isinstance(value, dict):
                doc[key] = value
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomlkit.dumps(doc), encoding="utf-8")
        return path

    @staticmethod
    def config_hash(cfg: RunConfig | dict[str, Any]) -> str:
        data = cfg.model_dump(mode="json") if isinstance(cfg, RunConfig) else cfg
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


config_manager = ConfigManager()
