"""Exception types raised across the package."""


class MapletError(Exception):
    """Base class for all library errors."""


class DegeneratePlane(MapletError):
    pass


class DegenerateGeometry(MapletError):
    pass


class EmptyFrame(MapletError):
    pass


class EmptyGraph(MapletError):
    pass


class InsufficientPairs(MapletError):
    pass


class RankDeficientNormals(MapletError):
    pass


class NoConvergence(MapletError):
    def __init__(self, message, transform=None, iterations=0):
        super().__init__(message)
        self.transform = transform
        self.iterations = iterations


class DisconnectedGraph(MapletError):
    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"nodes unreachable from root: {self.unreachable}")


class SingularNormalEquations(MapletError):
    pass


class OutOfRange(MapletError):
    pass


class ConfigError(MapletError):
    pass


class GimbalWarning(UserWarning):
    """Emitted when a 3D pose has enough roll/pitch that a planar projection is lossy."""
