"""Exception hierarchy shared by all modules."""


class InputError(ValueError):
    """Input rejected: wrong dimensions, non-finite values, bad ranges."""


class DegenerateShapeError(InputError):
    """Landmark configuration has no usable extent (collinear or collapsed)."""


class CapabilityError(RuntimeError):
    """Requested computation is outside what the implementation supports."""


class StateError(RuntimeError):
    """Object is not in a state that allows the requested operation."""


class ConvergenceError(RuntimeError):
    """Iterative solver hit its iteration cap.

    The last iterate and its residual are attached so callers can decide
    whether the partial result is usable.
    """

    def __init__(self, message, residual=None, iterate=None):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate
