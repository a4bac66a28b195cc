"""Exception hierarchy shared by all nvlab modules."""


class NvlabError(Exception):
    """Base class for domain errors raised by nvlab."""


class InvalidInputError(NvlabError, ValueError):
    """An argument violates a documented precondition."""


class NoZeroCrossingError(NvlabError):
    """The fitted window contains no sign change."""


class FitError(NvlabError):
    """A nonlinear fit failed to converge.

    ``diagnostics`` carries the optimizer status so callers can report it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(NvlabError):
    """A run configuration could not be parsed or validated."""

    def __init__(self, message, line=None, field=None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field
