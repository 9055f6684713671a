"""Exception hierarchy shared by every mfos module."""


class MfosError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 2


class ShapeMismatch(MfosError, ValueError):
    pass


class NonPositiveDepth(MfosError, ValueError):
    exit_code = 3


class InvalidShape(MfosError, ValueError):
    pass


class NoGradPath(MfosError, RuntimeError):
    exit_code = 3


# pose recovery
class TooFewPoints(MfosError):
    exit_code = 3


class DegenerateConfiguration(MfosError):
    exit_code = 3


class BehindCamera(MfosError):
    exit_code = 3


class NoConsensus(MfosError):
    exit_code = 3


class BadK(MfosError, ValueError):
    pass


# data
class ParseError(MfosError):
    pass


class MissingFile(MfosError, FileNotFoundError):
    pass


class BadIntrinsics(MfosError, ValueError):
    pass


class EmptyBBox(MfosError, ValueError):
    pass


class InsufficientViews(MfosError):
    pass


class IoError(MfosError, OSError):
    pass
