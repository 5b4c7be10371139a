"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here mark failure modes that callers (in particular the CLI) dispatch on.
"""


class FormatError(ValueError):
    """Volume file pair is malformed (bad header, wrong payload size, unknown dtype)."""


class GeometryError(ValueError):
    """A grid record does not match the data it is applied to."""


class GenerationError(RuntimeError):
    """Synthetic anatomy generation could not satisfy its constraints."""


class ConfigError(ValueError):
    """Experiment configuration is invalid; message carries the offending key path."""


class DependencyError(RuntimeError):
    """A pipeline stage is missing an upstream artifact; message names the absent file."""


class NumericalAbort(RuntimeError):
    """Training or adaptation hit a non-finite loss and was aborted."""
