"""Reference-conditioned temporal RBMs for sequence-to-sequence texture progression."""

from agetrbm.errors import (
    CapabilityError,
    ConvergenceError,
    DegenerateShapeError,
    InputError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConvergenceError",
    "DegenerateShapeError",
    "InputError",
    "StateError",
    "__version__",
]
