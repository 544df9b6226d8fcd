"""Exception types shared across the package."""


class UndialError(Exception):
    """Base class for all errors raised by undial_lab."""


class InvalidArgumentError(UndialError, ValueError):
    pass


class ShapeError(UndialError, ValueError):
    pass


class IncompatibleCheckpointError(UndialError):
    """Two parameter sets (or checkpoints) cannot be combined or compared."""


class NonFiniteLossError(UndialError, FloatingPointError):
    """Raised when a training objective produces NaN/inf; the step is not applied.

    ``diagnostics`` carries whatever the caller could gather at the failure
    point (step counter, loss value, offending parameter names).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
