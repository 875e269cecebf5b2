"""Exception taxonomy shared by all modules."""


class EkisubError(Exception):
    """Base class for every error raised by this package."""


class NotSymmetric(EkisubError):
    pass


class NotPositiveDefinite(EkisubError):
    pass


class DimensionMismatch(EkisubError):
    pass


class SolveFailure(EkisubError):
    """A dense factorization or solve broke down."""


class TooFewParticles(EkisubError):
    pass


class NoiseDimensionMismatch(EkisubError):
    pass


class RankDeficiencyInconsistent(EkisubError):
    """Detected more populated directions than the observer rank allows."""


class NonPositiveValues(EkisubError):
    """A log-log fit was requested on data with no usable positive values."""


class GenerationFailed(EkisubError):
    """Problem generation could not satisfy its invariants within retries."""


class IoFailure(EkisubError):
    pass


class SchemaVersionMismatch(EkisubError):
    pass


class ChecksumMismatch(EkisubError):
    pass


class ValidationError(EkisubError):
    """Bad configuration or command-line input."""
