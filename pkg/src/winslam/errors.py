"""Exception hierarchy shared by all stages of the pipeline."""


class SlamError(Exception):
    """Base class for every error raised by winslam."""


class DegenerateConfiguration(SlamError):
    """Correspondences cannot determine a relative pose."""


class InsufficientInliers(SlamError):
    """RANSAC found a model but too few points agree with it."""


class CheiralityTie(SlamError):
    """No essential-matrix decomposition strictly wins the depth test.

    The four candidates are attached as ``candidates``.
    """

    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


class LowParallax(SlamError):
    """Viewing rays are too close to parallel for triangulation."""


class BehindCamera(SlamError):
    """A point has non-positive depth in a camera that must see it."""


class DegenerateSet(SlamError):
    """Point set is collinear or coincident; alignment is undefined."""


class EmptyImage(SlamError):
    pass


class DimensionMismatch(SlamError):
    pass


class NonContiguousFrame(SlamError):
    pass


class TrackTableError(SlamError):
    """Loaded tracks violate a track-table invariant."""


class NoSharedTracks(SlamError):
    pass


class InsufficientKeyframes(SlamError):
    pass


class DisconnectedGraph(SlamError):
    """View graph of a window fell apart.

    ``components`` holds lists of keyframe positions (window-local indices),
    ordered by their first keyframe.
    """

    def __init__(self, message, components=(), edges=()):
        super().__init__(message)
        self.components = [list(c) for c in components]
        self.edges = list(edges)


class Disconnected(SlamError):
    """Averaging problem graph is not connected."""


class Underconstrained(SlamError):
    """Translation problem has more than the 4 gauge degrees of freedom."""

    def __init__(self, message, nullity=None):
        super().__init__(message)
        self.nullity = nullity


class NonConvergence(SlamError):
    """Iterative solver hit its iteration cap; best iterate is attached."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NoTriangulablePoints(SlamError):
    pass


class SingularNormalEquations(SlamError):
    pass


class NoAnchors(SlamError):
    pass


class EmptyVisibility(SlamError):
    pass


class NoAssociations(SlamError):
    pass


class ConfigError(SlamError):
    """Unknown key or out-of-range value in a pipeline configuration."""
