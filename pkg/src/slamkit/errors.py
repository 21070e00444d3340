"""Exception hierarchy shared by every slamkit module."""


class SlamKitError(Exception):
    """Base class for all toolkit errors."""


class DegenerateProjection(SlamKitError, ValueError):
    pass


class DegenerateConfiguration(SlamKitError, ValueError):
    pass


class InsufficientMatches(SlamKitError, ValueError):
    pass


class NoConsensus(SlamKitError, RuntimeError):
    pass


class EmptyCorpus(SlamKitError, ValueError):
    pass


class DisconnectedGraph(SlamKitError, ValueError):
    pass


class NoOverlap(SlamKitError, ValueError):
    pass


class DegenerateGeometry(SlamKitError, ValueError):
    pass


class InsufficientLength(SlamKitError, ValueError):
    pass


class NonPositiveBaseline(SlamKitError, ValueError):
    pass


class InsufficientSamples(SlamKitError, ValueError):
    pass


class UnitMismatch(SlamKitError, ValueError):
    pass


class MalformedFile(SlamKitError, ValueError):
    """Raised by parsers; carries the byte offset or line number of the fault."""

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class UnsupportedVersion(SlamKitError, ValueError):
    pass
