"""Exception types raised across the package.

Every error carries a human-readable message; CLI code maps them onto
exit codes (usage errors vs. runtime failures).
"""


class IdstyleError(Exception):
    """Base class for all package errors."""


# --- dataset ---------------------------------------------------------------

class MissingFile(IdstyleError):
    pass


class MalformedManifest(IdstyleError):
    pass


class DuplicateSample(IdstyleError):
    pass


class UnknownDomainId(IdstyleError):
    pass


class EmptyImage(IdstyleError):
    pass


class UnsupportedChannelCount(IdstyleError):
    pass


class EmptyCorpus(IdstyleError):
    pass


class InvalidBatchSize(IdstyleError):
    pass


class InvalidCounts(IdstyleError):
    pass


class IoFailure(IdstyleError):
    pass


# --- encoders --------------------------------------------------------------

class OddChannelCount(IdstyleError):
    pass


class ShapeMismatch(IdstyleError):
    pass


class UnsupportedActivation(IdstyleError):
    pass


class NoBackendRegistered(IdstyleError):
    pass


# --- generator -------------------------------------------------------------

class LevelOutOfRange(IdstyleError):
    pass


class DimensionMismatch(IdstyleError):
    pass


class DegenerateSpatial(IdstyleError):
    pass


class ChannelMismatch(IdstyleError):
    pass


# --- losses ----------------------------------------------------------------

class ZeroVector(IdstyleError):
    pass


class LabelOutOfRange(IdstyleError):
    pass


class NonFiniteComponent(IdstyleError):
    pass


class TooFewPositions(IdstyleError):
    pass


# --- metrics ---------------------------------------------------------------

class TooFewSamples(IdstyleError):
    pass


class NonPSDBeyondTolerance(IdstyleError):
    pass


class CorpusTooSmall(IdstyleError):
    pass


class AllPatchesRejected(IdstyleError):
    pass


class ImageTooSmall(IdstyleError):
    pass


class IncompleteGrid(IdstyleError):
    pass


class UntrainedCheckpoint(IdstyleError):
    pass


class EmptyEvalSplit(IdstyleError):
    pass


# --- training --------------------------------------------------------------

class SingleDomainCorpus(IdstyleError):
    pass


class DivergenceDetected(IdstyleError):
    pass


class NonFiniteLoss(IdstyleError):
    pass


class CheckpointIoFailure(IdstyleError):
    pass


class ConfigHashMismatch(IdstyleError):
    pass


class TooFewSnapshots(IdstyleError):
    pass


class UnknownVariant(IdstyleError):
    pass
