"""Exception types shared across the library.

Every hard failure raised by geoloop derives from GeoloopError so callers
(and the CLI) can map failures to exit codes in one place.
"""


class GeoloopError(Exception):
    """Base class for all geoloop failures."""


class ChartSeamError(GeoloopError):
    """Chart evaluation requested too close to the opposite pole."""


class IntegrationAccuracyError(GeoloopError):
    """Geodesic integration step too coarse; energy drift above threshold."""


class BvpFailureError(GeoloopError):
    """Shooting Newton iteration failed to converge inside a ball.

    Signals that the requested ball radius is too large; the caller is
    expected to shrink the cover and retry.
    """


class CoverFailureError(GeoloopError):
    """Ball cover construction could not satisfy the half-radius cover."""


class CutLocusResolutionError(GeoloopError):
    """Assembled cut-locus graph has a cycle or is disconnected.

    Raising fan_size usually fixes it.
    """


class AmbiguousCountError(GeoloopError):
    """Region boundary passes through a tree vertex within tolerance."""


class ClassificationInconsistencyError(GeoloopError):
    """A split piece of a flow limit failed the geodesic residual test."""


class FamilyContinuityError(GeoloopError):
    """Family flow continuity lost and unrepairable."""


class MonotonicityError(GeoloopError):
    """Slicing monotonicity violated beyond what trimming can repair."""


class DigonContractionError(GeoloopError):
    """Digon contraction recursion exceeded its induction measure."""


class ConfigError(GeoloopError):
    """Malformed experiment configuration."""
