"""Exception hierarchy shared across the package.

Each branch maps onto one CLI exit code: config errors exit 2, data errors
exit 3, numeric failures exit 4.
"""


class FlowTSEError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FlowTSEError):
    """Bad or inconsistent configuration."""

    exit_code = 2


class InvalidInputError(FlowTSEError):
    """An operation was called with arguments violating its preconditions."""

    exit_code = 2


class CapacityError(InvalidInputError):
    """Input length exceeds a model's positional capacity."""


class UndefinedSimilarityError(InvalidInputError):
    """Cosine similarity requested for a zero-norm embedding."""


class DataError(FlowTSEError):
    """Corpus, manifest, or audio-file problems."""

    exit_code = 3


class ManifestError(DataError):
    """Malformed or inconsistent manifest / pairing file."""


class CorpusError(DataError):
    """Corpus does not satisfy a sampling precondition (e.g. too few speakers)."""


class AudioIOError(DataError):
    """Problem reading or writing an audio file."""


class MissingFileError(AudioIOError):
    """Referenced audio file does not exist."""


class UnsupportedEncodingError(AudioIOError):
    """Audio file exists but its encoding is not supported."""


class MultichannelError(UnsupportedEncodingError):
    """Audio file has more than one channel."""


class NumericError(FlowTSEError):
    """Non-finite values encountered during computation."""

    exit_code = 4


class CheckpointError(FlowTSEError):
    """Checkpoint missing, corrupted, or version-incompatible."""

    exit_code = 3
