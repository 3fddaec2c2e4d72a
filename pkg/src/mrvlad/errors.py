"""Exception hierarchy shared across the package."""


class MrvladError(Exception):
    """Base class for all package errors."""


class ConfigError(MrvladError):
    """Invalid configuration (bad factors, radii, world extent, ...)."""


class InputTooSmallError(MrvladError):
    """Image or tensor too small for the requested operation."""


class ContractViolationError(MrvladError):
    """Caller broke an interface contract (shape/dimension mismatch)."""


class DegenerateVocabularyError(MrvladError):
    """Feature sample cannot support the requested vocabulary."""


class ZeroDescriptorError(MrvladError):
    """Descriptor is all-zero where a nonzero one is required."""


class QuerySkipped(MrvladError):
    """Query has no eligible positive; the training loop skips it."""


class DatasetTooSmallError(MrvladError):
    """Dataset cannot supply the requested number of negatives."""


class NonFiniteLossError(MrvladError):
    """Training produced a non-finite loss; carries diagnostics."""


class ManifestError(MrvladError):
    """Malformed manifest line; message carries the line number."""


class BrokenRecordError(MrvladError):
    """Manifest records reference missing image files."""


class DuplicateIdError(MrvladError):
    """Record or descriptor id occurs more than once."""


class RankDeficientError(MrvladError):
    """Sample rank below the requested projection dimension."""

    def __init__(self, message: str, achievable_dim: int):
        super().__init__(message)
        self.achievable_dim = achievable_dim


class EmptyEvaluationError(MrvladError):
    """No query was evaluable under the given radius."""


class StorageError(MrvladError):
    """Corrupt or incompatible binary file."""
