"""Exception types shared across the package."""


class RadarTwinError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RadarTwinError):
    """Invalid configuration, dimensions, thresholds, or parameters."""


class GeometryError(RadarTwinError):
    """Degenerate geometry (e.g. zero slant range)."""


class StateError(RadarTwinError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class CompatibilityError(RadarTwinError):
    """Model and input disagree on preprocessing or shape."""


class TrainingFailure(RadarTwinError):
    """Training diverged (non-finite loss).

    Attributes
    ----------
    epoch : int
        Epoch index at which the divergence was detected.
    """

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class UnsatisfiableDiversityError(RadarTwinError):
    """Diversity target could not be met before the expansion cap.

    Attributes
    ----------
    achieved : float
        Best diversity reached at the expansion cap.
    target : float
        Requested diversity.
    """

    def __init__(self, message, achieved, target):
        super().__init__(message)
        self.achieved = achieved
        self.target = target


class PhaseOrderError(RadarTwinError):
    """A phase was run before its prerequisite phase passed."""
