class TcmcapError(Exception):
    """Base class for package errors."""


class DomainError(TcmcapError, ValueError):
    """Inputs outside the region where a quantity is defined."""


class QuadratureError(DomainError):
    """Non-finite integrand values or a failed convergence check."""


class SolverError(TcmcapError):
    """Stationarity or root-finding failure."""


class BracketError(SolverError):
    """The free energy does not change sign across the search interval."""
