"""Exception taxonomy shared across the toolkit.

Each class maps to one CLI exit code (see ``cli.EXIT_CODES``) so that
callers and shell scripts can tell configuration mistakes, bad data,
network trouble, and endpoint capability gaps apart.
"""

from __future__ import annotations


class AnswerOrSearchError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AnswerOrSearchError):
    """Invalid or unresolvable configuration (bad paths, odd k, lambda < 1)."""


class DataError(AnswerOrSearchError):
    """Malformed or inconsistent data: parse failures, duplicate ids,
    domain violations of numeric inputs."""


class PairingError(DataError):
    """Two sequences that must be aligned by record id are not."""


class BalanceError(DataError):
    """A few-shot pool cannot supply the requested balanced composition."""

    def __init__(self, side: str, needed: int, available: int) -> None:
        self.side = side
        self.needed = needed
        self.available = available
        super().__init__(
            f"few-shot pool has too few {side} examples: need {needed}, have {available}"
        )


class TemplateError(ConfigError):
    """A prompt template does not contain exactly one question placeholder."""


class CalibrationError(DataError):
    """Threshold calibration received unusable input."""


class TransportError(AnswerOrSearchError):
    """The generation endpoint could not be reached or kept failing."""

    def __init__(self, message: str, record_id: str | None = None) -> None:
        self.record_id = record_id
        if record_id is not None:
            message = f"{message} (record {record_id})"
        super().__init__(message)


class CapabilityError(AnswerOrSearchError):
    """The endpoint answered but lacks a required capability
    (most commonly: per-token log-probabilities are disabled)."""


class RunAbortedError(AnswerOrSearchError):
    """A corpus run stopped early; carries the ids that did complete."""

    def __init__(self, failed_id: str, cause: Exception, completed_ids: list[str]) -> None:
        self.failed_id = failed_id
        self.cause = cause
        self.completed_ids = completed_ids
        super().__init__(
            f"run aborted at record {failed_id}: {cause} "
            f"({len(completed_ids)} records completed)"
        )
