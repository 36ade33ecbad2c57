"""Audio-visual concurrent speaker detection toolkit."""

from .types import (
    AudioWindow,
    CsdClass,
    DatasetManifest,
    FaceStreamSet,
    FrameLabels,
    Segment,
    SessionEntry,
    ValidationError,
    audio_window_length,
    label_from_speaker_count,
)
from .model import CsdModel, CsdNet, FusionConfig, TokenGeometry
from .estimator import CsdEstimator

__version__ = "0.1.0"

__all__ = [
    "AudioWindow",
    "CsdClass",
    "CsdEstimator",
    "CsdModel",
    "CsdNet",
    "DatasetManifest",
    "FaceStreamSet",
    "FrameLabels",
    "FusionConfig",
    "Segment",
    "SessionEntry",
    "TokenGeometry",
    "ValidationError",
    "audio_window_length",
    "label_from_speaker_count",
    "__version__",
]
