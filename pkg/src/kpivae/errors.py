"""Exception types shared across the pipeline."""


class KpivaeError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(KpivaeError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ValidationError(KpivaeError):
    """Input data violates a documented invariant."""


class ConfigError(KpivaeError):
    """A configuration value is out of its documented range."""


class MissingArtifactError(KpivaeError):
    """A required pipeline artifact (model, stats, ...) is absent."""


class NonFiniteError(KpivaeError):
    """A forward pass produced NaN or infinity."""


class TrainingDivergedError(KpivaeError):
    """The training objective became non-finite; carries last loss parts."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
