"""Exception hierarchy shared by all modules."""


class RydTofError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(RydTofError, ValueError):
    pass


class DomainError(RydTofError, ValueError):
    """Input lies outside the validity domain of a flight-time model."""


class GeometryError(RydTofError, ValueError):
    pass


class ConvergenceError(RydTofError, RuntimeError):
    pass


class ElectronReflected(RydTofError):
    """The electron ran out of kinetic energy before the detector plane."""

    def __init__(self, turning_point: float, message: str | None = None):
        self.turning_point = turning_point
        super().__init__(message or f"electron turned back at z = {turning_point:.6g} m")


class FitError(RydTofError, RuntimeError):
    pass


class NoPeakFound(FitError):
    pass


class DegenerateFit(FitError):
    """Fitted width collapsed below one bin."""


class NonConvergence(FitError, ConvergenceError):
    pass


class Underdetermined(FitError):
    pass


class IllConditioned(FitError):
    pass


class ConfigError(InvalidArgument):
    """Malformed or unknown configuration entry."""
