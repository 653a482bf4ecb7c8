"""GMTI range-Doppler digital twin with a three-phase T&E pipeline."""

__version__ = "0.1.0"

from . import blackswan, cli, localize, metrics, nnet, pipeline, rfsim, scene  # noqa: F401
from .errors import (  # noqa: F401
    CompatibilityError,
    ConfigurationError,
    GeometryError,
    PhaseOrderError,
    RadarTwinError,
    StateError,
    TrainingFailure,
    UnsatisfiableDiversityError,
)
