"""Exception hierarchy shared by all gsmind modules."""


class GsmindError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class InvalidRotation(GsmindError):
    pass


class SingularCovariance(GsmindError):
    pass


class BehindCamera(GsmindError):
    pass


class DegenerateLookAt(GsmindError):
    pass


# renderer / array plumbing
class ShapeMismatch(GsmindError):
    pass


class InvalidGradient(GsmindError):
    pass


# voxel map
class EmptyObservation(GsmindError):
    pass


class UnknownVoxel(GsmindError):
    pass


# instances
class ZeroFeature(GsmindError):
    pass


class UnknownInstance(GsmindError):
    pass


class InconsistentRecord(GsmindError):
    pass


# optimizer
class DivergedOptimization(GsmindError):
    pass


# dynamic updates
class NoValidPixels(GsmindError):
    pass


class DivergedRefinement(GsmindError):
    pass


class InsufficientEvidence(GsmindError):
    pass


# scene graph
class EmptyInstance(GsmindError):
    pass


class NoObservations(GsmindError):
    pass


class AnnotationUnavailable(GsmindError):
    pass


class AnnotationInvalid(GsmindError):
    pass


# grounding
class ParseFailure(GsmindError):
    pass


class EmptyScene(GsmindError):
    pass


class RoiUnrenderable(GsmindError):
    pass


class GroundingFailure(GsmindError):
    pass


# dataset io
class DataError(GsmindError):
    """Base for malformed or missing external data."""


class MissingFile(DataError):
    pass


class BadShape(DataError):
    pass


class BadDepthScale(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class InvalidEdit(DataError):
    pass
