"""Exception types raised across the package."""


class RigidFlowError(Exception):
    pass


class NotSkew(RigidFlowError, ValueError):
    pass


class BoxMismatch(RigidFlowError, ValueError):
    pass


class InvalidConfig(RigidFlowError, ValueError):
    pass


class NoMinimaFound(RigidFlowError):
    pass


class EmptyMinima(RigidFlowError, ValueError):
    pass


class SchemaMismatch(RigidFlowError, ValueError):
    pass


class NonFinite(RigidFlowError, FloatingPointError):
    """Raised when a forward pass, loss or integration step produces inf/nan."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
