"""Zero-shot phrase grounding from cross-attention maps gathered along DDIM inversion."""

from .errors import (
    ArgumentError,
    CorruptVocabularyError,
    DimensionError,
    EmptySelectionError,
    FormatError,
    GroundLensError,
    InvalidGroundTruthError,
    ModelCorruptionError,
    UndefinedMetricError,
    ValidationError,
)
from .grounding import SelectionConfig, harvest_attention, postprocess, run_pipeline
from .scheduler import NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "CorruptVocabularyError",
    "DimensionError",
    "EmptySelectionError",
    "FormatError",
    "GroundLensError",
    "InvalidGroundTruthError",
    "ModelCorruptionError",
    "NoiseSchedule",
    "SelectionConfig",
    "UndefinedMetricError",
    "ValidationError",
    "harvest_attention",
    "make_schedule",
    "postprocess",
    "run_pipeline",
]
