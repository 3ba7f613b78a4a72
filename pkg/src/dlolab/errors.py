"""Exception hierarchy shared by all dlolab modules."""


class DloLabError(Exception):
    """Base class for every error raised by this package."""


class InvalidDirection(DloLabError, ValueError):
    pass


class DegenerateLink(DloLabError, ValueError):
    pass


class DimensionMismatch(DloLabError, ValueError):
    pass


class InvalidGrasp(DloLabError, IndexError):
    pass


class ConfigError(DloLabError, ValueError):
    pass


class FormatError(DloLabError):
    pass


class CorruptDataset(DloLabError):
    pass


class WindowTooLong(DloLabError, ValueError):
    pass


class EmptyDataset(DloLabError):
    pass


class ShapeError(DloLabError, ValueError):
    pass


class DomainError(DloLabError, ValueError):
    pass


class CorruptCheckpoint(DloLabError):
    pass


class ProtocolError(DloLabError, ValueError):
    pass


class AmbiguousCrossing(DloLabError):
    """Two strands cross in projection at indistinguishable heights."""

    def __init__(self, message, segments=None):
        super().__init__(message)
        self.segments = segments


class IoError(DloLabError, OSError):
    pass


class SimulationError(DloLabError, RuntimeError):
    pass
