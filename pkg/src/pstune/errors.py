"""Exception hierarchy shared by all modules."""


class PSTuneError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PSTuneError, ValueError):
    """An argument is outside its documented domain."""


class SequencingError(PSTuneError):
    """A metric record arrived out of iteration order."""


class NumericalError(PSTuneError, ArithmeticError):
    """A factorization or fit failed for numerical reasons."""


class FitError(PSTuneError):
    """A convergence curve cannot be fitted to the given segment."""


class InsufficientDataError(FitError):
    """Too few usable points to fit a convergence curve."""


class DivergenceError(PSTuneError, ArithmeticError):
    """Training produced a non-finite gradient or loss."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"training diverged at iteration {iteration}")


class ProtocolError(PSTuneError):
    """A relocation message violated the on-demand relocation protocol."""


class DegenerateSegmentWarning(UserWarning):
    """A metrics segment could not be turned into a training triple."""
