"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` (and subclasses) to exit code 1 and
anything else to exit code 2.
"""


class ValidationError(ValueError):
    """Bad user input, a violated precondition or a malformed file."""


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DecodeError(ValidationError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"byte offset {offset}: {message}")


class UnsupportedFormatError(ValidationError):
    pass


class SynthesisError(ValidationError):
    pass


class StreamError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, entry_ids=()):
        self.entry_ids = list(entry_ids)
        if self.entry_ids:
            message = f"{message} (manifest entries {self.entry_ids})"
        super().__init__(message)


class CheckpointError(ValidationError):
    pass


class QuantizationError(ValidationError):
    pass
