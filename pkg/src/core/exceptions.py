"""
Exception hierarchy for the EOpR toolkit.

Validation problems (bad inputs, bad configuration) derive from
ValidationError; numerical breakdowns derive from NumericalError. The CLI
maps the two families onto distinct exit codes.
"""
from typing import Optional


class EoprError(Exception):
    """Base class for all toolkit errors"""


class ValidationError(EoprError, ValueError):
    """Input or configuration failed validation"""


class ConfigurationError(ValidationError):
    """Unknown or invalid configuration key/value"""


class PanelFormatError(ValidationError):
    """Panel file does not match the declared layout"""


class MissingValueError(ValidationError):
    """A unit lacks an observation for some time label"""


class UnknownTreatedError(ValidationError):
    """Treated label not present in the panel"""


class BadT0Error(ValidationError):
    """Intervention index outside the valid range"""


class InsufficientHistoryError(ValidationError):
    """A unit does not cover the requested alignment window"""

    def __init__(self, unit: str, message: Optional[str] = None):
        self.unit = unit
        super().__init__(message or f"Insufficient history for unit '{unit}'")


class NonFiniteError(ValidationError):
    """Input contains NaN or infinite values"""


class EmptyGridError(ValidationError):
    """Lambda grid is empty"""


class TooShortPreError(ValidationError):
    """Pre-period too short for the requested holdout"""


class EmptyRangeError(ValidationError):
    """Scoring range contains no indices"""


class NumericalError(EoprError, ArithmeticError):
    """A numerical procedure could not produce a finite result"""


class DegenerateScaleError(NumericalError):
    """Normalization scale factor is zero"""


class SingularPhiError(NumericalError):
    """Representor Gram matrix is numerically singular"""


class DegenerateSpectrumError(NumericalError):
    """Control matrix has zero largest singular value"""
