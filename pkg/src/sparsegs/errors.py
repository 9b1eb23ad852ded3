"""Exception hierarchy. Every failure class the CLI reports maps to one subclass."""


class SplatError(Exception):
    """Base class for all package errors.

    The CLI renders these as ``error: <ClassName>: <message>`` with a
    nonzero exit code.
    """


class BehindCamera(SplatError):
    pass


class OutOfBounds(SplatError):
    pass


class ZeroQuaternion(SplatError):
    pass


class SingularCovariance(SplatError):
    pass


class DegreeMismatch(SplatError):
    pass


class UnknownView(SplatError):
    pass


class DegenerateBox(SplatError):
    pass


class InsufficientVisibility(SplatError):
    pass


class EmptyImage(SplatError):
    pass


class InvalidStep(SplatError):
    pass


class FeatureViewMismatch(SplatError):
    pass


class SizeMismatch(SplatError):
    pass


class ShapeMismatch(SplatError):
    pass


class ForwardStateMissing(SplatError):
    pass


class EmptyField(SplatError):
    pass
