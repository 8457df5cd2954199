"""Exception types raised across the engine."""


class RepNeXtError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(RepNeXtError, ValueError):
    pass


class NonDivisibleChannels(ShapeMismatch):
    pass


class DegenerateOutput(ShapeMismatch):
    pass


class OddSpatial(ShapeMismatch):
    pass


class ParityMismatch(RepNeXtError, ValueError):
    pass


class EvenCanvas(ParityMismatch):
    pass


class StrideOnFirst(RepNeXtError, ValueError):
    pass


class GroupMismatch(RepNeXtError, ValueError):
    pass


class SpecMismatch(RepNeXtError, ValueError):
    pass


class AlreadyFused(RepNeXtError):
    pass


class InvalidConfig(RepNeXtError, ValueError):
    """A model configuration violates an invariant; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaMismatch(RepNeXtError):
    pass


class CorruptFile(RepNeXtError):
    pass
