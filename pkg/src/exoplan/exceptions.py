"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A numeric setting is outside its documented range."""


class FormatVersionError(ValueError):
    """A file was written with an unsupported format version."""


class DatasetParseError(ValueError):
    """A dataset file is truncated or has a malformed record."""


class FingerprintMismatchError(ValueError):
    """An artifact was produced from a different environment or input."""

    def __init__(self, message, expected=None, found=None):
        super().__init__(message)
        self.expected = expected
        self.found = found


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an artifact that does not exist yet."""


class ConstructionError(ValueError):
    """A behavior policy with the requested quality cannot be built."""


class AssumptionViolated(ValueError):
    """Policies passed to a theory check do not share an action marginal."""


class EnumerationCapExceeded(ValueError):
    """An exhaustive enumeration would exceed its configured cap."""


class PlanningError(ValueError):
    """The penalized reward table cannot be planned against."""


class NotFittedError(ValueError, AttributeError):
    """Estimator used before ``fit``."""
