"""Exception types raised across the package.

Everything derives from :class:`LaneError` so the CLI can map any
validation failure to exit code 1 with a single ``except`` clause.
"""


class LaneError(ValueError):
    pass


class NonPositiveDepth(LaneError):
    pass


class DegenerateLane(LaneError):
    pass


class NoGroundFound(LaneError):
    pass


class EmptyLabels(LaneError):
    pass


class OutOfBounds(LaneError):
    pass


class InsufficientData(LaneError):
    pass


class EmptyDepth(LaneError):
    pass


class ShapeMismatch(LaneError):
    pass


class NoValidPixels(LaneError):
    pass


class InvalidParams(LaneError):
    pass


class OutsideROI(LaneError):
    pass


class ZeroForwardExtent(LaneError):
    pass


class NoValidLanes(LaneError):
    pass


class InvalidSpec(LaneError):
    pass


class ParseError(LaneError):
    """Malformed dataset record. Carries the 1-based line number and field."""

    def __init__(self, message, line=None, field=None, frame_id=None):
        self.line = line
        self.field = field
        self.frame_id = frame_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if frame_id is not None:
            where.append(f"frame {frame_id!r}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
