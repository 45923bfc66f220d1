"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""

from __future__ import annotations


class PrestoError(Exception):
    code = "PRESTO_ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


class MomentViolation(PrestoError):
    code = "MOMENT_VIOLATION"


class SizeLimit(PrestoError):
    code = "SIZE_LIMIT"


class BadProbability(PrestoError):
    code = "BAD_PROBABILITY"


class ShapeMismatch(PrestoError):
    code = "SHAPE_MISMATCH"


class NoContraction(PrestoError):
    code = "NO_CONTRACTION"


class NoConvergence(PrestoError):
    code = "NO_CONVERGENCE"


class BadStoppingTime(PrestoError):
    code = "BAD_STOPPING_TIME"


class BudgetExceeded(PrestoError):
    code = "BUDGET_EXCEEDED"


class InvalidAlpha(PrestoError):
    code = "INVALID_ALPHA"


class MeasurabilityError(PrestoError):
    code = "MEASURABILITY"


class NotASupermartingale(PrestoError):
    code = "NOT_A_SUPERMARTINGALE"


class ConfigError(PrestoError):
    code = "CONFIG_ERROR"


class UnknownDriver(ConfigError):
    code = "UNKNOWN_DRIVER"
