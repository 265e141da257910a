"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid argument shapes, counts or configuration values."""


class NumericError(ArithmeticError):
    """Non-finite values, degenerate geometry or points behind the camera."""


class ParseError(ValueError):
    """Malformed binary or text file.

    ``offset`` is the byte offset (binary files) or line number (text files)
    where parsing failed.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
