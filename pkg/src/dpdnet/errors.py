"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class SizeError(ValueError):
    """Requested tensor is larger than the platform can index."""


class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (fewer than two values per channel)."""


class SpecError(ValueError):
    """A block or network description violates its invariants."""


class ParseError(SpecError):
    """A network config document could not be parsed.

    ``line`` and ``key`` locate the problem when known.
    """

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class FormatError(ValueError):
    """A binary file does not follow the expected record layout."""


class CorruptDataError(ValueError):
    """A dataset file parsed but contains impossible values."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
