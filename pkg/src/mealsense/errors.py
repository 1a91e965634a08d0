"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MealSenseError(Exception):
    """Base class for all errors raised by this package."""


# --- data ingestion -------------------------------------------------------


class MalformedRow(MealSenseError):
    def __init__(self, line: int, detail: str = ""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {detail}" if detail else ""))


class NonMonotonicTime(MealSenseError):
    def __init__(self, line: int):
        self.line = line
        super().__init__(f"timestamp not strictly increasing at line {line}")


class OverlappingLabels(MealSenseError):
    def __init__(self, i: int, j: int):
        self.i, self.j = i, j
        super().__init__(f"label intervals {i} and {j} overlap")


class InvalidSession(MealSenseError):
    pass


class OutOfRange(MealSenseError):
    pass


class SessionTooShort(MealSenseError):
    pass


# --- numeric core ---------------------------------------------------------


class ShapeMismatch(MealSenseError):
    pass


class NonFiniteError(MealSenseError):
    pass


class DegenerateBatch(MealSenseError):
    pass


class ClassOutOfRange(MealSenseError):
    pass


class CheckpointError(MealSenseError):
    pass


# --- models and pipeline --------------------------------------------------


class EmptyTrainingSet(MealSenseError):
    pass


class TooFewSamples(MealSenseError):
    pass


class MissingLabel(MealSenseError):
    pass


class ClassAbsent(MealSenseError):
    pass


class EmptyTestSet(MealSenseError):
    pass


class ConfigError(MealSenseError):
    pass


class IoError(MealSenseError):
    """A referenced input path is missing or an output cannot be written."""
