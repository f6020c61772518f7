"""Exception hierarchy shared across the package."""


class StaygenError(Exception):
    """Base class for all staygen errors."""


class ConfigurationError(StaygenError):
    """Invalid configuration values."""


class FormatError(StaygenError):
    """Malformed input file."""


class OutOfRegionError(StaygenError):
    """Point falls outside the area map's bounding box."""


class DomainError(StaygenError):
    """Argument outside an operation's domain (e.g. the null area)."""


class VocabError(StaygenError):
    """Area id or token missing from the vocabulary."""


class NoHomeInferableError(StaygenError):
    """Trajectory has no non-null nighttime data."""


class NoWorkInferableError(StaygenError):
    """Trajectory has no non-null daytime data."""


class TrainingError(StaygenError):
    """Training failed (non-finite loss or gradients)."""


class MetricError(StaygenError):
    """Metric undefined for the given sample (e.g. no trips)."""
