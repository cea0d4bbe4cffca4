"""Exception hierarchy. Every error carries the CLI exit code of its family."""

from __future__ import annotations


class ProtoFsmError(Exception):
    exit_code = 1


# config errors (exit 2)


class ConfigError(ProtoFsmError, ValueError):
    exit_code = 2


class TemplateError(ProtoFsmError, KeyError):
    exit_code = 2

    def __init__(self, slot: str):
        super().__init__(slot)
        self.slot = slot

    def __str__(self):
        return f"missing prompt slot: {self.slot}"


# repo / filter errors (exit 3)


class RepoIOError(ProtoFsmError, OSError):
    exit_code = 3


class EmptyRepo(ProtoFsmError):
    exit_code = 3


class NoModuleFound(ProtoFsmError):
    exit_code = 3


class UnknownProtocol(ProtoFsmError, KeyError):
    exit_code = 3


# inference errors (exit 4)


class ParseFailure(ProtoFsmError, ValueError):
    """One model response without a usable structured block; counted as a zero-vote iteration."""

    exit_code = 4


class StageFailed(ProtoFsmError):
    exit_code = 4

    def __init__(self, stage: str, message: str, raw_responses: list[str] | None = None):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage
        self.raw_responses = list(raw_responses or [])


class InferenceFailed(ProtoFsmError):
    """Raised by the pipeline when a stage fails; carries what was produced so far."""

    exit_code = 4

    def __init__(self, cause: StageFailed, partial_report: dict):
        super().__init__(str(cause))
        self.cause = cause
        self.partial_report = partial_report


# backend errors (exit 5)


class BackendError(ProtoFsmError):
    exit_code = 5

    def __init__(self, message: str, attempts: int = 0, retryable: bool = False):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class ChatTimeout(BackendError, TimeoutError):
    pass


class FixtureMiss(BackendError):
    pass


class BackendMismatch(BackendError):
    pass


# evaluation / input errors (exit 6)


class InvalidFsm(ProtoFsmError, ValueError):
    exit_code = 6

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations) or "invalid FSM")


class ParseError(ProtoFsmError, ValueError):
    exit_code = 6

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class SchemaError(ProtoFsmError, ValueError):
    exit_code = 6

    def __init__(self, message: str, missing: list[str] | None = None, extra: list[str] | None = None):
        self.missing = sorted(missing or [])
        self.extra = sorted(extra or [])
        details = []
        if self.missing:
            details.append(f"missing keys: {', '.join(self.missing)}")
        if self.extra:
            details.append(f"extra keys: {', '.join(self.extra)}")
        super().__init__(f"{message}: {'; '.join(details)}" if details else message)


class IndexFormatError(ProtoFsmError, ValueError):
    exit_code = 6


class DimError(ProtoFsmError, ValueError):
    exit_code = 6


class IntegrityError(ProtoFsmError, ValueError):
    exit_code = 6


class TemplateMissing(ProtoFsmError, KeyError):
    exit_code = 6

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return f"no payload template for message {self.message}"


class CanonicalNameError(ProtoFsmError, ValueError):
    exit_code = 6
