"""Exception hierarchy shared by every module."""


class Warp4DError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(Warp4DError, ValueError):
    """Bad user input (configs, flags, files). CLI exit code 1."""


class DomainError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class InvalidCameraError(ValidationError):
    pass


class InvalidRotationError(ValidationError):
    pass


class InsufficientFramesError(ValidationError):
    pass


class LimitViolationError(ValidationError):
    def __init__(self, joint, angle, limits):
        self.joint = joint
        self.angle = angle
        self.limits = limits
        super().__init__(f"joint {joint}: angle {angle!r} outside limits [{limits[0]!r}, {limits[1]!r}]")


class BehindCameraError(ValidationError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)


class NumericFailureError(Warp4DError, ArithmeticError):
    """Non-finite or exploding numbers. CLI exit code 2."""

    def __init__(self, message, term=None):
        self.term = term
        super().__init__(message)


class DegenerateScheduleError(NumericFailureError):
    pass


class DivergenceError(NumericFailureError):
    pass
