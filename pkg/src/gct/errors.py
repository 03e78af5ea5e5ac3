"""Exception taxonomy shared across the package."""


class GCTError(Exception):
    """Base class for all package errors."""


class ParseError(GCTError):
    """A file or LLM response did not match its documented format."""


class OrderError(GCTError):
    """Word onsets are not monotonically nondecreasing."""


class ExtractorError(GCTError):
    """A feature-extraction backend failed."""


class DimMismatch(GCTError):
    """Feature dimensions or row counts do not line up."""


class EmptyTranscript(GCTError):
    """An operation that needs words received none."""


class NonIntegerDelay(GCTError):
    """An FIR delay is not an integer multiple of the TR."""


class WindowTooLarge(GCTError):
    """A smoothing window exceeds the series length."""


class TooShort(GCTError):
    """A timecourse is too short for the requested trim."""


class ShapeMismatch(GCTError):
    """Matrix shapes are inconsistent."""


class SingularDesign(GCTError):
    """The design matrix could not be factorized."""


class InsufficientVoxels(GCTError):
    """Fewer voxels pass the threshold than were requested."""


class DegenerateHull(GCTError):
    """The weight cloud has zero volume; uniform hull sampling is undefined."""


class EmptyCatalog(GCTError):
    """An n-gram catalog is empty."""


class LLMError(GCTError):
    """An LLM backend call failed (HTTP error, replay miss, bad payload)."""


class NoViableCandidate(GCTError):
    """Every candidate explanation scored at or below zero."""


class IncoherentOutput(GCTError):
    """The LLM returned an empty or duplicate story paragraph twice."""


class TimingMismatch(GCTError):
    """Stimulus timing does not fit inside the response time grid."""


class EmptyROI(GCTError):
    """An ROI has no member voxels present in the data."""


class DimensionMismatch(GCTError):
    """Driving vectors do not share an explanation index."""


class TooFewEvents(GCTError):
    """Not enough events for a time-locked average."""


class ZeroNormTarget(GCTError):
    """The target pattern has zero norm."""


class ConfigError(GCTError):
    """The pipeline configuration failed schema validation."""


class MissingDependency(GCTError):
    """A pipeline stage was run before the stages it depends on."""


class StageFailure(GCTError):
    """A pipeline stage raised; the original error is chained."""
