"""Exception hierarchy shared by all modules."""


class QuasiprobError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(QuasiprobError, ValueError):
    """An input parameter or config field is invalid.

    ``field`` carries the dotted path of the offending config entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ScheduleError(ValidationError):
    """A phase schedule cannot be used (e.g. a non-monotone polynomial sweep)."""


class ConvergenceError(QuasiprobError, ArithmeticError):
    """A numerical integral or fit did not reach its tolerance within budget."""


class TableRangeError(QuasiprobError, ValueError):
    """A pattern-table lookup fell outside the tabulated range."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending


class FitError(ConvergenceError):
    """The DC-trace phase fit is underdetermined or did not converge."""


class UniformizeError(QuasiprobError):
    """Phase uniformization kept fewer points than the configured minimum."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
