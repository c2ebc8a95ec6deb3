"""Exception types shared across the package."""


class NeuromonError(Exception):
    """Base class for all package errors."""


class ValidationError(NeuromonError, ValueError):
    """Input data violates a documented invariant (non-finite values, bad shapes...)."""


class DegenerateWindowError(ValidationError):
    """A window is too short for the requested feature computation."""


class WindowUnderflowError(NeuromonError):
    """More entries were popped than the window holds."""


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class TrainingError(NeuromonError):
    pass


class ModelFormatError(NeuromonError):
    """A model file is malformed, tampered with, or of an unsupported version."""


class ProbeMismatchError(ModelFormatError):
    """A model was trained against a different probe set than the one in use."""


class TraceFormatError(NeuromonError):
    """A trace or wire record could not be decoded.

    ``offset`` is the byte offset (binary formats) or line number (text formats)
    of the offending record, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(NeuromonError):
    """A stream violated the session protocol (frames after end, framing errors...)."""


class RewriteError(NeuromonError):
    """A step could not be rewritten (remote failure or a no-op rewrite)."""


class GrammarError(ValidationError):
    """A reconstructed sample does not follow the trigger-template layout."""
