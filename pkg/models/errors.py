from typing import Optional


class RegistrationError(Exception):
    """Base class for all registration engine errors"""

    exit_code = 1


class ConfigurationError(RegistrationError, ValueError):
    """Invalid configuration value or combination"""

    exit_code = 2


class VolumeIOError(RegistrationError, OSError):
    """Reading or writing a file failed"""

    exit_code = 3


class UnsupportedFeatureError(VolumeIOError):
    """File uses a feature this engine does not read (compression, oblique axes, ...)"""

    def __init__(self, path: str, field: str, reason: str):
        self.path = path
        self.field = field
        super().__init__(f"{path}: unsupported {field}: {reason}")


class SamplingError(RegistrationError):
    """Could not place the requested number of admissible samples"""

    exit_code = 4

    def __init__(self, message: str, coverage: Optional[dict] = None):
        self.coverage = coverage or {}
        super().__init__(message)


class OutOfDomainError(RegistrationError):
    """A sample point lies outside the physical bounds of a volume"""

    exit_code = 4


class NumericalError(RegistrationError, ArithmeticError):
    """Non-finite values or an undefined metric"""

    exit_code = 5
