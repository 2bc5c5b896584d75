"""Exception hierarchy shared across the package.

All conditions a caller can sensibly handle derive from ``FoleyError``.
The CLI maps ``FoleyError`` to exit code 2 (validation) and anything else
to exit code 1 (runtime failure).
"""


class FoleyError(Exception):
    """Base class for errors raised by foleyctl."""


class InvalidInput(FoleyError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInput):
    """Tensor/array shapes are incompatible for the requested operation."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in shapes)})"
        super().__init__(message)
        self.shapes = shapes


class FormatError(FoleyError):
    """A file does not conform to its binary/text format.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class Unsupported(FoleyError):
    """The file is well-formed but uses a feature we do not implement."""


class ValidationError(FoleyError):
    """A structured input (manifest, request body) fails validation.

    ``line`` is the 1-based line number for line-oriented inputs.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
