"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input to a public operation."""


class FitError(RuntimeError):
    """The transform eigen-solve failed.

    ``diagnostics`` carries the condition numbers of the two matrices in the
    generalized eigenproblem when they could be computed.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NotFoundError(LookupError):
    """No visible repository entry satisfies the request."""


class ConfigError(ValueError):
    """Bad configuration file. ``key`` and ``line`` locate the problem."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class BackPressureError(RuntimeError):
    """The store is full and nothing can be evicted."""
