from . import ops
from .gradcheck import GradcheckReport, finite_difference_check, rel_error
from .tensor import (
    DEFAULT_DTYPE,
    BackwardError,
    Node,
    NonFiniteError,
    OpKind,
    ShapeError,
    Tape,
    Tensor,
    backward,
    current_tape,
    no_grad,
)

__all__ = [
    "ops", "Tensor", "Tape", "Node", "OpKind", "backward", "no_grad", "current_tape",
    "ShapeError", "BackwardError", "NonFiniteError", "DEFAULT_DTYPE",
    "finite_difference_check", "GradcheckReport", "rel_error",
]
