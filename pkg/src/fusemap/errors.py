"""Exception hierarchy shared by all pipeline stages."""


class FusemapError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FusemapError, ValueError):
    """Bad argument or configuration supplied by the caller."""


class PipelineError(FusemapError):
    """A processing stage could not produce a result."""


class DatasetError(FusemapError, OSError):
    """On-disk dataset is missing, malformed or unwritable."""


# geometry
class NonUnitQuaternion(ValidationError):
    pass


# depth
class InvalidFactor(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class TooFewPoints(PipelineError):
    pass


# sync
class UnsortedStream(ValidationError):
    pass


# registration
class EmptyCloud(PipelineError):
    pass


class DegenerateCorrespondences(PipelineError):
    pass


class MissingNormals(PipelineError):
    pass


class SingularSystem(PipelineError):
    pass


# trajectory
class LengthMismatch(ValidationError):
    pass


class TimestampMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class PairRegistrationError(PipelineError):
    """Registration failed for one keyframe pair; carries the partial trajectory."""

    def __init__(self, pair_index, cause, partial=None, results=None):
        super().__init__(f"registration failed for keyframe pair {pair_index}: {cause}")
        self.pair_index = pair_index
        self.cause = cause
        self.partial = partial
        self.results = results or []


# dataset
class InvalidScene(ValidationError):
    pass


class MissingFile(DatasetError):
    pass


class CorruptHeader(DatasetError):
    pass


class InconsistentDims(DatasetError):
    pass
