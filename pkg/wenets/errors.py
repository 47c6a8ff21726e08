"""Exception types shared by the pipeline stages."""
from __future__ import annotations


class WenetsError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(WenetsError, ValueError):
    pass


class ShapeError(WenetsError, ValueError):
    pass


class AudioFormatError(WenetsError, ValueError):
    pass


class SilentSignalError(WenetsError, ValueError):
    pass


class ManifestError(WenetsError, ValueError):
    pass


class MissingTargetError(WenetsError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep messages readable.
        return str(self.args[0]) if self.args else ""


class ModelFileError(WenetsError, ValueError):
    pass


class NumericalError(WenetsError, ArithmeticError):
    pass
