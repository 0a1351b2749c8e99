"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class CaaMarginError(Exception):
    exit_code = 1


class ConfigError(CaaMarginError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(CaaMarginError, ValueError):
    exit_code = 3


class NumericalError(CaaMarginError, ArithmeticError):
    exit_code = 4


class ZeroNormError(NumericalError):
    """A vector that must be normalized has (near) zero length."""

    def __init__(self, row, what="vector"):
        self.row = row
        super().__init__(f"{what} row {row} has zero norm")


class EmptyPairSetError(DataError):
    """An anchor has no positives or no negatives in the batch."""

    def __init__(self, speaker, kind):
        self.speaker = speaker
        self.kind = kind
        super().__init__(f"anchor of speaker {speaker!r} has no {kind} pairs in the batch")


class UnknownSpeakerError(DataError):
    def __init__(self, speaker, table="class vector table"):
        self.speaker = speaker
        super().__init__(f"speaker {speaker!r} missing from {table}")


class LabelRangeError(DataError):
    def __init__(self, label, n_classes):
        self.label = label
        self.n_classes = n_classes
        super().__init__(f"label {label} outside [0, {n_classes})")


class VanishedGradientsError(NumericalError):
    def __init__(self):
        super().__init__("vanished gradients: both task gradients are zero")


class StaleCacheError(CaaMarginError, RuntimeError):
    def __init__(self):
        super().__init__("encoder cache does not match the current parameters")


class InsufficientPairsError(DataError):
    def __init__(self, kind, requested, available):
        self.kind = kind
        self.requested = requested
        self.available = available
        super().__init__(
            f"requested {requested} {kind} trials but only {available} distinct pairs exist"
        )
