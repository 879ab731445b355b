"""Exception hierarchy shared by every stage of the toolkit."""


class WorldKitError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(WorldKitError, ValueError):
    pass


class UnderdeterminedError(WorldKitError):
    """Too few distinct samples to fit a model."""


class DegenerateAlignment(WorldKitError):
    """A fitted depth transform would reverse depth ordering."""


class ProtocolError(WorldKitError):
    """An external provider answered with a malformed or mismatched response."""


class ProviderTimeout(WorldKitError):
    pass


class FormatError(WorldKitError):
    """A binary blob or file could not be parsed."""


class ExportError(WorldKitError):
    pass


class WorldValidationError(WorldKitError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class StageError(WorldKitError):
    """Wraps a failure with the pipeline stage and layer it happened in."""

    def __init__(self, stage, layer, cause):
        self.stage = stage
        self.layer = layer
        self.cause = cause
        where = f"stage '{stage}'" + (f", layer '{layer}'" if layer is not None else "")
        super().__init__(f"{where}: {cause}")


class ParseError(FormatError):
    """Malformed text input; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        prefix = ":".join(str(x) for x in (source, line) if x is not None)
        super().__init__(f"{prefix}: {message}" if prefix else message)
