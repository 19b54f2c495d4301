"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """A caller-supplied argument violates an operation's contract."""


class DomainError(ValueError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation encountered NaN/Inf or exhausted its numeric guards."""


class DataError(ValueError):
    """A dataset violates a structural requirement (empty class, count mismatch...)."""


class ParseError(ValueError):
    """A text input could not be parsed. Carries the offending row when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class FormatError(ValueError):
    """A binary input does not follow its declared file format."""


class ConfigError(ValueError):
    """An experiment config is invalid. Carries the dotted field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CalibrationError(RuntimeError):
    """Calibration failed (typically divergence). Carries the training trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
