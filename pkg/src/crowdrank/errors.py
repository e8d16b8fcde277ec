"""Exception hierarchy shared across the package."""


class CrowdRankError(Exception):
    """Base class for every error raised by crowdrank."""


class ImageTooSmall(CrowdRankError):
    pass


class InvalidRatio(CrowdRankError):
    pass


class OutOfBounds(CrowdRankError):
    pass


class ShapeMismatch(CrowdRankError):
    pass


class DimMismatch(CrowdRankError):
    pass


class NotSquare(CrowdRankError):
    pass


class EncoderFailure(CrowdRankError):
    pass


class TargetMissing(CrowdRankError):
    pass


class KinkTooClose(CrowdRankError):
    pass


class EmptyInput(CrowdRankError):
    pass


class LengthMismatch(CrowdRankError):
    pass


class ParseError(CrowdRankError):
    """Malformed manifest or record; message carries the file/line locus."""


class BoundsError(CrowdRankError):
    """Annotation points outside the image; message lists the offenders."""


class ConfigError(CrowdRankError):
    pass
