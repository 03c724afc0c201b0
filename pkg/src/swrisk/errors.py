"""Exception hierarchy shared across the package."""


class SWRiskError(Exception):
    """Base class for all package errors."""


class FormatError(SWRiskError, ValueError):
    """A file does not follow its declared binary or text layout."""


class UnsupportedEncodingError(FormatError):
    """Well-formed WAV whose encoding is not mono PCM16."""


class TruncationError(FormatError):
    """Payload size disagrees with the header."""


class ConfigError(SWRiskError, ValueError):
    pass


class InsufficientInputError(SWRiskError, ValueError):
    pass


class AlignmentError(SWRiskError, ValueError):
    pass


class ShapeError(SWRiskError, ValueError):
    pass


class InputError(SWRiskError, ValueError):
    """Model input is missing a modality or has the wrong dimension."""


class SchemaError(SWRiskError, ValueError):
    pass


class DuplicateError(SWRiskError, ValueError):
    pass


class DomainError(SWRiskError, ValueError):
    pass


class TrainingError(SWRiskError, RuntimeError):
    pass


class UndefinedMetricError(SWRiskError, ValueError):
    """AUROC requested on a single-class label set.

    ``metrics`` carries whatever could still be computed (accuracy, F1,
    confusion) so callers can report partial results.
    """

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics
