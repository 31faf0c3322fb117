"""Exception hierarchy shared across the toolkit.

Three broad categories map onto CLI exit codes: usage (1), data (2) and
numeric (3).  Finer-grained subclasses carry machine-readable ``code``
strings that the HTTP service and CLI error lines reuse verbatim.
"""


class EarmarkError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "error"
    exit_code = 2


class UsageError(EarmarkError):
    code = "usage"
    exit_code = 1


class DataError(EarmarkError):
    code = "data"
    exit_code = 2


class NumericError(EarmarkError):
    code = "numeric"
    exit_code = 3


class InvalidAnnotationError(DataError):
    """A landmark lies outside its owning volume."""

    code = "invalid_annotation"


class RoiExcludesLandmarkError(DataError):
    """ROI crop would drop one or more landmarks."""

    code = "roi_excludes_landmark"

    def __init__(self, names):
        self.names = tuple(names)
        super().__init__(f"ROI excludes landmarks: {', '.join(self.names)}")


class SizeMismatchError(DataError):
    code = "size_mismatch"


class MissingLandmarkError(DataError):
    code = "missing_landmark"


class MetadataError(DataError):
    code = "malformed_metadata"


class ImageFormatError(DataError):
    code = "image_format"


class TruncatedPayloadError(ImageFormatError):
    """Image payload ended early; ``offset`` is the byte where it stopped."""

    code = "truncated_payload"

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class NetspecError(DataError):
    """Positioned diagnostic for the architecture description language."""

    code = "netspec"

    def __init__(self, message, line, col):
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {message}")


class ShapeError(DataError):
    code = "shape"


class DegeneracyError(NumericError):
    code = "degenerate_configuration"


class InsufficientPointsError(DataError):
    code = "insufficient_points"


class DivergenceError(NumericError):
    code = "divergence"
