"""Exception hierarchy shared by every module and mapped to CLI exit codes."""

from __future__ import annotations


class ThreadgaugeError(Exception):
    """Base class for all library errors."""

    exit_code = 1
    kind = "error"


class SchemaError(ThreadgaugeError):
    """Input file is missing required columns, empty, or otherwise unusable."""

    exit_code = 4
    kind = "schema_error"


class ArchiveError(ThreadgaugeError):
    """Row-level problems found while parsing an archive in strict mode."""

    exit_code = 4
    kind = "archive_error"

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class LexiconError(ThreadgaugeError):
    exit_code = 4
    kind = "lexicon_error"


class DegenerateDataError(ThreadgaugeError):
    """The data cannot support the requested estimate (zero variance, one class...)."""

    exit_code = 5
    kind = "degenerate_data"


class ConvergenceError(ThreadgaugeError):
    exit_code = 5
    kind = "convergence_error"

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class SeparationError(ConvergenceError):
    kind = "separation"
