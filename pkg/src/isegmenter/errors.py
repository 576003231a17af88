"""Exception hierarchy shared by every layer of the engine."""


class ISegError(Exception):
    """Base class for all engine errors."""


class InvalidThresholdError(ISegError, ValueError):
    pass


class InvalidInputError(ISegError, ValueError):
    pass


class FrozenObserverError(ISegError):
    pass


class NotCalibratedError(ISegError):
    pass


class ScaleOverflowError(ISegError, OverflowError):
    pass


class OverflowRiskError(ISegError, OverflowError):
    """An integer accumulator could exceed its declared width."""


class DimensionError(ISegError, ValueError):
    pass


class DivisionDomainError(ISegError, ZeroDivisionError):
    pass


class CheckpointError(ISegError):
    """Checkpoint contents are inconsistent with the graph or width contract."""


class ModeError(ISegError):
    """FP32 checkpoint used where an integer one is required, or vice versa."""


class ContainerError(ISegError):
    """Malformed container file."""
