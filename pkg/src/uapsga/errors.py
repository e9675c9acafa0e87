"""Exception hierarchy shared by the whole package."""


class UAPError(Exception):
    """Base class for every error raised by uapsga."""


class ShapeError(UAPError, ValueError):
    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(f"{primitive}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class UsageError(UAPError, RuntimeError):
    pass


class NumericError(UAPError, ArithmeticError):
    pass


class ConfigError(UAPError, ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(UAPError, ValueError):
    pass


class FormatError(DataError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IntegrityError(FormatError):
    pass
