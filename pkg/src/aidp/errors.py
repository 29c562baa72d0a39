"""Exception hierarchy shared across the package."""


class AidpError(Exception):
    """Base class for all package errors."""


class ShapeError(AidpError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class DomainError(AidpError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(AidpError, ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(AidpError, ValueError):
    """Invalid model, training, or run configuration."""


class FormatError(AidpError, ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ParseError(ConfigError):
    """A config text could not be parsed."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
