"""Exception and warning types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for all validation errors raised by this package."""


class DegenerateMask(PipelineError):
    """Binary mask has too few, or collinear, foreground pixels for a moment fit."""


class ZeroChannel(PipelineError):
    """A color channel has zero Minkowski mean; illuminant gains are undefined."""


class CropTooLarge(PipelineError):
    """Requested crop size exceeds an image dimension."""


class ShapeMismatch(PipelineError):
    """Input tensor shapes disagree with the parameter set."""


class NonFiniteLoss(PipelineError):
    """Training loss became NaN or infinite."""


class MissingFeatures(PipelineError):
    """Feature store lacks vectors for some manifest images."""


class EmptyClass(PipelineError):
    """A trained class has zero examples; balancing weights are undefined."""


class EmptyClassRow(PipelineError):
    """A confusion-matrix row has no samples; sensitivity is undefined."""


class UnknownLabel(PipelineError):
    """An evaluated label is outside the known eight classes."""


class SingleClassLabels(PipelineError):
    """ROC AUC needs at least one positive and one negative example."""


class IdMismatch(PipelineError):
    """Prediction matrices are not aligned on the same image ids."""


class PoolTooLarge(PipelineError):
    """Configuration pool exceeds the exhaustive-search guard."""


class ConfigError(PipelineError):
    """Malformed pipeline configuration file or value."""


class TooFewLesions(UserWarning):
    """A class has fewer lesion groups than folds; its split degrades to unstratified."""
