"""Exception hierarchy shared by the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for all errors raised by thermocal."""

    exit_code = 3


class ConfigError(CalibrationError, ValueError):
    """Invalid configuration or argument values."""

    exit_code = 1


class DataError(CalibrationError, ValueError):
    """Malformed, missing or inconsistent measurement data."""

    exit_code = 2


class NumericalError(CalibrationError, ArithmeticError):
    """A numerical procedure produced a singular or non-finite result."""

    exit_code = 3
