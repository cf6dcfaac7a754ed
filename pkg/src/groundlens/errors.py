"""Exception hierarchy shared by every groundlens module."""


class GroundLensError(Exception):
    """Base class for all errors raised by groundlens."""


class DimensionError(GroundLensError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(GroundLensError, ValueError):
    """A scalar argument is outside its valid range."""


class ModelCorruptionError(GroundLensError):
    """Model weights or layer specs are inconsistent with the inputs."""


class CorruptVocabularyError(GroundLensError):
    """A token id does not exist in the vocabulary."""


class EmptySelectionError(GroundLensError):
    """A layer/timestep/token selection came out empty."""


class InvalidGroundTruthError(GroundLensError, ValueError):
    """Ground-truth boxes do not define a usable mask."""


class UndefinedMetricError(GroundLensError, ArithmeticError):
    """A metric is mathematically undefined for the given input."""


class ValidationError(GroundLensError, ValueError):
    """Manifest or configuration content failed validation."""


class FormatError(GroundLensError, IOError):
    """A binary or text file does not match its declared format."""
