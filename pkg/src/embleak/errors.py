"""Exception hierarchy. Each family maps to one CLI exit code."""


class EmbleakError(Exception):
    exit_code = 1


class UsageError(EmbleakError, ValueError):
    exit_code = 2


class DataError(EmbleakError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class VocabularyError(DataError, ValueError):
    pass


class DivergenceError(EmbleakError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown or {}


class ExternalServiceError(EmbleakError):
    exit_code = 5


class BackendError(ExternalServiceError):
    def __init__(self, backend, message):
        super().__init__(f"backend {backend!r}: {message}")
        self.backend = backend


class TransportError(ExternalServiceError):
    pass


class ProtocolError(ExternalServiceError):
    pass


class AugmentationError(ExternalServiceError):
    pass


class JudgeProtocolError(ExternalServiceError):
    pass


class ExtractorError(ExternalServiceError):
    pass
