from typing import Optional


class PyqmeError(Exception):
    """Base class of every error raised by pyqme."""


class ConfigurationError(PyqmeError, ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        full = message if lineno is None else f"line {lineno}: {message}"
        super().__init__(full)
        self.message = message
        self.lineno = lineno

    def __reduce__(self):
        return self.__class__, (self.message, self.lineno)


class NyquistError(ConfigurationError):
    pass


class StateInvariantError(PyqmeError, ValueError):
    pass


class IntegrationError(PyqmeError, RuntimeError):
    """Raised when a propagated state leaves the physical set at time ``t``."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (t = {t:.6e} s)")
        self.message = message
        self.t = t

    def __reduce__(self):
        # crosses process boundaries from correlation and scenario workers
        return self.__class__, (self.message, self.t)


class TruncationError(IntegrationError):
    pass


class FitError(PyqmeError, RuntimeError):
    def __init__(self, message: str, residual: Optional[float] = None):
        full = message if residual is None else f"{message} (residual norm = {residual:.3e})"
        super().__init__(full)
        self.message = message
        self.residual = residual

    def __reduce__(self):
        return self.__class__, (self.message, self.residual)


class UndefinedMeanError(PyqmeError, ValueError):
    pass


class CalibrationError(PyqmeError, RuntimeError):
    pass


class EnergyBalanceError(PyqmeError, AssertionError):
    pass


class PhotonCountError(PyqmeError, AssertionError):
    """Spectral photon count disagrees with the time-domain count."""
