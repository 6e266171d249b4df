"""Multi-view multimodal anomaly detection engine.

Pipeline: synthetic calibrated data -> patch features per modality ->
selective cross-view refinement -> contrastive + geometric alignment
training -> memory-bank nearest-neighbor scoring -> evaluation.
"""

__version__ = "0.1.0"

from .datamodel import (
    CameraModel,
    FeatureMap,
    PatchGrid,
    ViewObservation,
    ViewSet,
    load_viewset,
    save_viewset,
)
from .errors import (
    ConfigError,
    DataError,
    EngineError,
    NumericError,
)
from .tensorio import read_tensor, write_tensor

__all__ = [
    "CameraModel",
    "ConfigError",
    "DataError",
    "EngineError",
    "FeatureMap",
    "NumericError",
    "PatchGrid",
    "ViewObservation",
    "ViewSet",
    "load_viewset",
    "read_tensor",
    "save_viewset",
    "write_tensor",
    "__version__",
]
