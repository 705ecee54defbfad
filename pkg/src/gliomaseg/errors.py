"""Exception hierarchy shared by every stage of the pipeline.

Each exception carries a ``category`` string; the CLI prints it as the first
token of its one-line error message so callers can dispatch on it.
"""


class PipelineError(Exception):
    category = "PipelineError"


class ConfigError(PipelineError):
    category = "ConfigError"


class DataError(PipelineError):
    category = "DataError"


# volume_io
class NiftiError(DataError):
    category = "NiftiError"


class BadHeader(NiftiError):
    category = "BadHeader"


class BadMagic(NiftiError):
    category = "BadMagic"


class UnsupportedDatatype(NiftiError):
    category = "UnsupportedDatatype"


class TruncatedData(NiftiError):
    category = "TruncatedData"


class NonFiniteVoxel(NiftiError):
    category = "NonFiniteVoxel"


class MissingModality(DataError):
    category = "MissingModality"


class ShapeMismatch(DataError):
    category = "ShapeMismatch"


class BadLabelValue(DataError):
    category = "BadLabelValue"


# preprocess
class EmptyMask(DataError):
    category = "EmptyMask"


class ZeroVariance(DataError):
    category = "ZeroVariance"


class DegenerateHistogram(DataError):
    category = "DegenerateHistogram"


class SingularFit(DataError):
    category = "SingularFit"


class OddDimension(DataError):
    category = "OddDimension"


# tensor engine / segmenter
class NoGraph(PipelineError):
    category = "NoGraph"


class CheckpointError(DataError):
    category = "CheckpointError"


class BadConfig(ConfigError):
    category = "BadConfig"


class EmptyDataset(DataError):
    category = "EmptyDataset"


class NonFiniteLoss(PipelineError):
    category = "NonFiniteLoss"


# metrics
class LengthMismatch(DataError):
    category = "LengthMismatch"


class DegenerateRanks(DataError):
    category = "DegenerateRanks"


# forest / survival
class EmptyData(DataError):
    category = "EmptyData"


class NonFiniteInput(DataError):
    category = "NonFiniteInput"


class DimensionMismatch(DataError):
    category = "DimensionMismatch"


class TooFewSamples(DataError):
    category = "TooFewSamples"


class TooFewRecords(DataError):
    category = "TooFewRecords"


class EmptyBrainMask(DataError):
    category = "EmptyBrainMask"


class NegativeDays(DataError):
    category = "NegativeDays"


# phantom
class SpecInfeasible(ConfigError):
    category = "SpecInfeasible"
