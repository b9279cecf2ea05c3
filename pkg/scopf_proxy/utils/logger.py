import logging
import os

LOG_ENV_VAR = "SCOPF_PROXY_LOG"
_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def configure_logging(level: str | None = None) -> str:
    """Install one stderr handler on the package loggers; returns the level used."""
    raw = level or os.environ.get(LOG_ENV_VAR) or "INFO"
    resolved = str(raw).strip().upper()
    if resolved not in {"DEBUG", "INFO", "WARNING", "ERROR"}:
        resolved = "INFO"

    root = logging.getLogger("scopf_proxy")
    if not any(getattr(h, "_scopf_proxy", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        handler._scopf_proxy = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(resolved)
    return resolved
