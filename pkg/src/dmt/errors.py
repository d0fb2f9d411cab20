"""Exception types shared across the toolkit."""


class DmtError(Exception):
    """Base class for all toolkit errors."""


class DegenerateInputError(DmtError, ValueError):
    """Input too small or too uniform for the requested computation."""


class IncompatibleModelsError(DmtError, ValueError):
    """Models cannot be combined or run together (window, config, landmark count)."""


class TrainingDataError(DmtError, ValueError):
    """Training data is empty or unusable."""


class ValidationError(DmtError, ValueError):
    """Data violates a structural constraint (bounds, counts, formats)."""


class AnnotationParseError(DmtError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DegenerateEyeError(DmtError, ValueError):
    """Eye corners coincide, so the aspect ratio is undefined."""


class FlatTraceError(DmtError, ValueError):
    """Trace has a non-positive maximum EAR."""


class BlobFormatError(DmtError, ValueError):
    """Model blob bytes are malformed or carry an unknown tag."""


class PoolError(DmtError):
    """Base class for pool service and client failures."""


class PoolConnectionError(PoolError):
    pass


class PoolStartupError(PoolError):
    pass


class NotFoundError(PoolError, KeyError):
    pass


class IntegrityError(PoolError):
    """Pulled bytes do not hash to the requested id."""


class PoolValidationError(PoolError, ValueError):
    """The pool rejected a push (bad blob, kind mismatch, bad metadata)."""
