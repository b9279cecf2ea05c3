from typing import Any


class ScopfError(RuntimeError):
    """Base error. ``code`` is a stable identifier, ``exit_code`` the CLI status."""

    exit_code = 1

    def __init__(self, code: str, message: str, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.details:
            out["details"] = self.details
        return out


class ConfigError(ScopfError):
    exit_code = 2


class CaseParseError(ScopfError):
    exit_code = 2


class UnsupportedCostError(CaseParseError):
    pass


class TopologyError(ScopfError):
    exit_code = 2


class InfeasibleError(ScopfError):
    exit_code = 3


class NumericalError(ScopfError):
    exit_code = 4


class DegeneratePointError(NumericalError):
    pass


class ContractViolationError(ScopfError):
    exit_code = 1


class StaleTapeError(ScopfError):
    exit_code = 1
