"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes disagree with a model, transform, or file header."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout or version."""


class UndefinedMetricError(ValueError):
    """A metric has no value on this input (single class, zero variance...)."""


class TrainingError(RuntimeError):
    """Optimization diverged."""


class LinkageError(ValueError):
    """A checkpoint is paired with a PCA transform it was not trained with."""
