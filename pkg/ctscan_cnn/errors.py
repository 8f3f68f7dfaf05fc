"""Exception hierarchy for the ctscan-cnn engine.

Every error carries a ``detail`` message and the process ``exit_code`` the
CLI returns for it:

  0  success
  1  usage / configuration error
  2  data error
  3  numeric / integrity error
"""

from typing import Optional


class CtscanError(Exception):
    """Base error; ``detail`` is what the CLI prints."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ── Usage / configuration (exit 1) ─────────────────────────────────────

class UsageError(CtscanError):
    exit_code = 1


class ConfigError(CtscanError):
    exit_code = 1


class ReportParseError(UsageError):
    """A RunLog line or external metrics row could not be parsed."""

    def __init__(self, source: str, line: int, detail: str):
        super().__init__(f"{source}:{line}: {detail}")
        self.source = source
        self.line = line


# ── Data (exit 2) ──────────────────────────────────────────────────────

class DataError(CtscanError):
    exit_code = 2


class IngestionError(DataError):
    pass


class DecodeError(DataError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"cannot decode {path}: {detail}")
        self.path = path


class LabelError(DataError):
    pass


# ── Numeric / integrity (exit 3) ───────────────────────────────────────

class ShapeError(CtscanError, ValueError):
    exit_code = 3


class NumericInputError(CtscanError, ValueError):
    exit_code = 3


class UndefinedClassError(CtscanError, ValueError):
    exit_code = 3

    def __init__(self, classes, detail: str):
        super().__init__(detail)
        self.classes = list(classes)


class IntegrityError(CtscanError):
    exit_code = 3

    def __init__(self, detail: str, offset: Optional[int] = None):
        if offset is not None:
            detail = f"{detail} (at byte {offset})"
        super().__init__(detail)
        self.offset = offset


class UnsupportedVersionError(IntegrityError):
    pass
