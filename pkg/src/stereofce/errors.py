"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`StereoFceError`, so callers (the CLI in particular) can catch one
type and turn it into a one-line diagnostic.
"""


class StereoFceError(Exception):
    """Base class for all errors raised by stereofce."""


class DimensionError(StereoFceError):
    """An array argument has the wrong rank or an incompatible shape."""


class InputError(StereoFceError):
    """An argument value is outside the domain an operation accepts."""


class ConfigError(StereoFceError):
    """A configuration value or combination of values is invalid."""


class ParseError(StereoFceError):
    """A file does not conform to its expected text or binary format."""


class VersionError(StereoFceError):
    """A stored artifact does not match what the running code expects."""


class BehindCameraError(InputError):
    """A 3D point lies at or behind the camera plane and cannot project."""


class NumericsError(StereoFceError):
    """A computation produced NaN or infinity where a finite value is required."""
