"""Exception hierarchy shared by all modules."""


class KLError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(KLError, ValueError):
    pass


class EmptyDomainError(KLError):
    """The vacant set has no grid node; the spectrum is the infinite sentinel."""


class ConvergenceError(KLError):
    """Iterative solver ran out of budget.

    ``partial`` carries whatever the solver had when it stopped.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class SizeGuardError(KLError):
    pass


class ScheduleInfeasibleError(KLError):
    pass


class RegimeViolationError(KLError):
    pass


class InsufficientDataError(KLError):
    def __init__(self, message, usable_range=None):
        super().__init__(message)
        self.usable_range = usable_range


class DivergenceError(KLError):
    def __init__(self, message, bins=()):
        super().__init__(message)
        self.bins = tuple(bins)


class SaturationError(KLError):
    """Truncated spectrum cannot hold the requested density."""

    def __init__(self, message, achieved_density=None):
        super().__init__(message)
        self.achieved_density = achieved_density
