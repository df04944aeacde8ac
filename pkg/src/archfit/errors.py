"""Exception and warning types raised across the package."""


class ArchfitError(ValueError):
    pass


class DegenerateMesh(ArchfitError):
    pass


class NoIntersection(ArchfitError):
    pass


class MultipleLoops(ArchfitError):
    pass


class DegenerateContour(ArchfitError):
    pass


class OpenSurface(ArchfitError):
    pass


class TopologyMismatch(ArchfitError):
    pass


class GridMismatch(ArchfitError):
    pass


class EmptySet(ArchfitError):
    pass


class TooFewSlices(ArchfitError):
    pass


class NonFinite(ArithmeticError):
    """Loss or gradient left the finite range; ``trace`` holds the rows logged so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class NoApex(ArchfitError):
    pass


class EmptyRegion(ArchfitError):
    pass


class TooShort(ArchfitError):
    pass


class CoincidentCenters(ArchfitError):
    pass


class SelfIntersection(ArchfitError):
    pass


class SliceFailure(ArchfitError):
    pass


class RankDeficient(UserWarning):
    pass


class AmbiguousApex(UserWarning):
    pass
