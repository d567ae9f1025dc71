"""Exception types shared across the package."""

from .tensor import DimensionError, GraphError, NumericError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """Malformed or empty input data."""


class VocabError(ValueError):
    """Token id outside the vocabulary, or mismatched vocabularies."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GenerationError(ValueError):
    """Requested synthetic data cannot be generated."""


class CheckpointError(ValueError):
    """Unreadable checkpoint or incompatible warm start."""


__all__ = [
    "CheckpointError",
    "ConfigError",
    "DimensionError",
    "GenerationError",
    "GraphError",
    "InputError",
    "NumericError",
    "ParseError",
    "VocabError",
]
