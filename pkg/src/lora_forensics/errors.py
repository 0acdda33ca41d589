"""Exception hierarchy shared by every module."""


class ForensicsError(Exception):
    """Base class for all errors raised by lora_forensics."""


# snapshot_io
class MalformedHeader(ForensicsError):
    pass


class ShapeMismatch(ForensicsError):
    pass


class MissingPartner(ForensicsError):
    pass


class OverlappingOffsets(ForensicsError):
    pass


class IoFailure(ForensicsError):
    pass


class MissingFile(ForensicsError):
    pass


class DuplicateEntry(ForensicsError):
    pass


class LabelParseError(ForensicsError):
    pass


# spectral
class NonFiniteInput(ForensicsError):
    pass


class DimensionMismatch(ForensicsError):
    pass


class NotSymmetric(ForensicsError):
    pass


class NoConvergence(ForensicsError):
    pass


# features
class UnlabeledSnapshot(ForensicsError):
    pass


class InconsistentTopology(ForensicsError):
    pass


# predictors
class EmptyClass(ForensicsError):
    pass


class SingularSystem(ForensicsError):
    pass


class InconsistentTables(ForensicsError):
    pass


class EmptyTable(ForensicsError):
    pass


class TopologyMismatch(ForensicsError):
    pass


class FormatVersionError(ForensicsError):
    pass


# metrics
class LengthMismatch(ForensicsError):
    pass


class ZeroTruthLabel(ForensicsError):
    pass


class TooFewRepeats(ForensicsError):
    pass


# harness / synthgen
class TooFewGroups(ForensicsError):
    pass


class LabelNotInClassSet(ForensicsError):
    pass


class DimError(ForensicsError):
    pass


class ConfigError(ForensicsError):
    pass
