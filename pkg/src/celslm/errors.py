class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input carries no usable variation (constant vector, zero-norm row...)."""


class EmptySegmentError(ValueError):
    """An attention segment has no keys."""


class LinkDownError(RuntimeError):
    """A transfer was requested over a link with zero bandwidth."""
