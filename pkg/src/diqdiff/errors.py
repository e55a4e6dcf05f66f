"""Exception types raised across the package."""


class DiQDiffError(Exception):
    """Base class for all package errors."""


class MalformedRowError(DiQDiffError):
    def __init__(self, path, line_no, line):
        super().__init__(f"{path}:{line_no}: malformed row {line!r}")
        self.line_no = line_no


class EmptyCorpusError(DiQDiffError):
    pass


class SplitTooShortError(DiQDiffError):
    pass


class BatchTooSmallError(DiQDiffError):
    pass


class InvalidScheduleError(DiQDiffError):
    pass


class StepRangeError(DiQDiffError):
    pass


class DimensionError(DiQDiffError):
    pass


class InvalidTemperatureError(DiQDiffError):
    pass


class DegenerateInputError(DiQDiffError):
    pass


class UndefinedCosineError(DiQDiffError):
    pass


class NumericalFailure(DiQDiffError):
    """A loss component became non-finite."""

    def __init__(self, component, value):
        super().__init__(f"non-finite {component}: {value}")
        self.component = component
        self.value = value


class CheckpointError(DiQDiffError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class InvalidStateError(DiQDiffError):
    pass


class InvalidKError(DiQDiffError):
    pass


class InvalidRankError(DiQDiffError):
    pass


class ThresholdUndefinedError(DiQDiffError):
    pass


class ConfigError(DiQDiffError):
    pass
