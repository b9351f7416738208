"""Exception hierarchy. Each carries an exit code used by the command line."""


class HydraError(Exception):
    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class GeometryError(HydraError, ValueError):
    pass


class SchemaError(HydraError, ValueError):
    """Malformed input file; ``path`` names the offending field."""

    exit_code = 2

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message, path=path)
        self.path = path


class InvalidTemplateMix(HydraError, ValueError):
    pass


class InsufficientData(HydraError, ValueError):
    pass


class NoReference(HydraError, ValueError):
    pass


class FrameMismatch(HydraError, ValueError):
    pass


class MissingSubscore(HydraError, ValueError):
    pass


class ShapeMismatch(HydraError, ValueError):
    pass


class EmptyGrid(HydraError, ValueError):
    pass


class ConfigHashMismatch(HydraError):
    exit_code = 3


class NonFiniteLoss(HydraError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, batch=None):
        super().__init__(message, batch=batch)
        self.batch = batch
