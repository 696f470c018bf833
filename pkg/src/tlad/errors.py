"""Exception types shared across the package."""


class TladError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(TladError, ValueError):
    """Shapes or dimensions of operands disagree with a contract."""


class ConfigError(TladError, ValueError):
    """Invalid configuration value (bad K, unknown class, bad stride, ...)."""


class GraphError(TladError, ValueError):
    """A tape/graph contract was violated (e.g. non-scalar loss)."""


class ParseError(TladError, ValueError):
    """A data file could not be parsed; message carries path and line number."""

    def __init__(self, message: str, pathः str = "", line: int | None = None):
        loc = path
        if line is not None:
            loc = f"{path}:{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class MetricError(TladError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class DivergenceError(TladError, RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""
