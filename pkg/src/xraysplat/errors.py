"""Exception hierarchy shared by every module."""


class XraySplatError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(XraySplatError, ValueError):
    """Invalid configuration value or file. ``key`` names the offending field."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(XraySplatError):
    """Input data is missing, malformed or inconsistent."""


class FileFormatError(DataError):
    pass


class DimMismatch(DataError, ValueError):
    pass


class InsufficientViews(DataError):
    pass


class TooFewOccupiedVoxels(DataError):
    pass


class InverseOutOfDomain(XraySplatError, ValueError):
    pass


class KernelBehindSource(XraySplatError):
    pass


class Culled(XraySplatError):
    """Kernel does not contribute to the requested view."""


class DivergenceDetected(XraySplatError, FloatingPointError):
    pass
