"""Exception hierarchy. CLI exit codes map onto these classes."""


class RarrgError(Exception):
    exit_code = 1


class ValidationError(RarrgError, ValueError):
    exit_code = 2


class ParseError(ValidationError):
    """Malformed input record; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ExternalServiceError(RarrgError):
    exit_code = 3


class NumericError(RarrgError, FloatingPointError):
    exit_code = 4
