"""Exception types raised across the toolkit."""


class BackdoorError(Exception):
    """Base class for every error raised by this package."""


class EmptySignal(BackdoorError, ValueError):
    pass


class SilentSignal(BackdoorError, ValueError):
    pass


class NonPositivePower(BackdoorError, ValueError):
    pass


class SegmentTooShort(BackdoorError, ValueError):
    pass


class RateMismatch(BackdoorError, ValueError):
    pass


class UnsupportedFormat(BackdoorError, ValueError):
    pass


class MixedSampleRates(BackdoorError, ValueError):
    pass


class EmptySpeakerDir(BackdoorError, ValueError):
    pass


class TooFewSegments(BackdoorError, ValueError):
    pass


class PlanOverflow(BackdoorError, ValueError):
    pass


class SubsetTooSmall(BackdoorError, ValueError):
    pass


class MissingTrigger(BackdoorError, KeyError):
    pass


class TooShort(BackdoorError, ValueError):
    pass


class TooFewFrames(BackdoorError, ValueError):
    pass


class DimensionMismatch(BackdoorError, ValueError):
    pass


class LabelOutOfRange(BackdoorError, ValueError):
    pass


class EmptySet(BackdoorError, ValueError):
    pass


class Degenerate(BackdoorError, ValueError):
    pass


class OutOfRange(BackdoorError, ValueError):
    pass


class ZeroVector(BackdoorError, ValueError):
    pass


class SpeakerWithoutSegments(BackdoorError, ValueError):
    pass


class MTooLarge(BackdoorError, ValueError):
    pass


class NoImpostors(BackdoorError, ValueError):
    pass


class SchemaVersionMismatch(BackdoorError, ValueError):
    pass


class StageError(BackdoorError, RuntimeError):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
