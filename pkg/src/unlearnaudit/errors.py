"""Exception hierarchy shared by every stage of the harness."""


class AuditError(Exception):
    """Base class for all harness errors."""

    exit_code = 1


class ArgumentError(AuditError, ValueError):
    """An argument is outside its documented domain."""


class FormatError(AuditError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ValidationError(AuditError, ValueError):
    """Parsed content violates a data invariant."""


class CoverageError(AuditError):
    """Some samples lack the member/non-member observations an estimate needs."""

    exit_code = 3

    def __init__(self, message, sample_ids=()):
        ids = list(sample_ids)
        if ids:
            shown = ", ".join(str(i) for i in ids[:20])
            more = "" if len(ids) <= 20 else f" (+{len(ids) - 20} more)"
            message = f"{message}: samples [{shown}]{more}"
        super().__init__(message)
        self.sample_ids = ids


class ConfigError(AuditError):
    """The experiment configuration failed validation."""

    exit_code = 2


class PipelineError(AuditError):
    """A stage was invoked out of order or against stale outputs."""

    exit_code = 4
