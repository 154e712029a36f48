"""Exception types shared across the pipeline."""


class E5Error(Exception):
    """Base class for all e5kit errors."""


class DimensionError(E5Error, ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(E5Error, ValueError):
    """Text was empty after whitespace trimming."""


class DegenerateEmbeddingError(E5Error, ValueError):
    """An embedding had zero norm where cosine scoring was required."""


class ConfigurationError(E5Error, ValueError):
    """A config value is out of range, unknown, or inconsistent."""


class ValidationError(E5Error, ValueError):
    """Input data violates a structural requirement (duplicate ids, bad labels, ...)."""


class UndefinedCorrelationError(E5Error, ValueError):
    """Correlation is undefined because one input has zero variance."""


class DataStarvationError(E5Error, RuntimeError):
    """Not enough data to form the requested batch, fill, or pool."""


class ParseError(E5Error, ValueError):
    """A line of an input file could not be parsed.

    Carries the 1-based line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
