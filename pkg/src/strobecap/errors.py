"""Exception hierarchy shared by every stage of the pipeline."""


class StrobeCapError(Exception):
    """Base class for all package errors."""


class StructuralError(StrobeCapError):
    """Containers whose parts disagree in length or shape."""


class FormatError(StrobeCapError):
    """Malformed tensor file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class QuantizationError(StrobeCapError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateColorError(StrobeCapError):
    pass


class CalibrationError(StrobeCapError):
    pass


class RenderInputError(StrobeCapError):
    pass


class OptimizationError(StrobeCapError):
    """Raised when the loss goes non-finite; ``group`` names the first bad parameter group."""

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group
