"""Exception hierarchy shared by all modules."""


class RayRegError(Exception):
    """Base class for every error raised by this package."""


# volume I/O
class UnreadableFile(RayRegError, OSError):
    pass


class BadHeader(RayRegError, ValueError):
    pass


class UnsupportedDatatype(RayRegError, ValueError):
    pass


class EmptyMask(RayRegError, ValueError):
    pass


# geometry
class BehindCamera(RayRegError, ValueError):
    pass


class NearPiRotation(RayRegError, ValueError):
    pass


# rendering
class BadScale(RayRegError, ValueError):
    pass


# embeddings
class MissingPose(RayRegError, ValueError):
    pass


class SizeMismatch(RayRegError, ValueError):
    pass


class BadMagic(RayRegError, ValueError):
    pass


class DimMismatch(RayRegError, ValueError):
    pass


# subspace / registration
class TooFewVisibleTemplates(RayRegError, ValueError):
    pass


class DegenerateConfiguration(RayRegError, ValueError):
    pass


class NoValidHypothesis(RayRegError, RuntimeError):
    pass


# evaluation
class EmptyLandmarks(RayRegError, ValueError):
    pass


class EmptyResults(RayRegError, ValueError):
    pass
