"""Camera geometry for generic depth sensing.

Parametric and learned (ray surface) camera models, target-based
calibration, self-supervised photometric losses, multi-camera rigs,
depth metrics, camera embeddings and survey-scan processing.
"""

from .cameras import EUCM, MODELS, UCM, Brown, CameraModel, DoubleSphere, Pinhole
from .errors import CamGeoError, ConvergenceError, DegenerateError, FormatError, OutOfDomainError, ShapeError
from .geometry import Pose, compose, invert

__all__ = [
    "Brown",
    "CamGeoError",
    "CameraModel",
    "ConvergenceError",
    "DegenerateError",
    "DoubleSphere",
    "EUCM",
    "FormatError",
    "MODELS",
    "OutOfDomainError",
    "Pinhole",
    "Pose",
    "ShapeError",
    "UCM",
    "compose",
    "invert",
]
