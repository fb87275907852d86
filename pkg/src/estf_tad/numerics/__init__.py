from .tensor import (
    ConfigError,
    NumericError,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    get_dtype,
    grad_enabled,
    make_result,
    no_grad,
    parameter,
    precision,
    set_dtype,
)
from . import ops
from .gradcheck import CheckReport, grad_check
from .io import load_checkpoint, load_tensor, save_checkpoint, save_tensor

__all__ = [
    "CheckReport",
    "ConfigError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "check_finite",
    "get_dtype",
    "grad_check",
    "grad_enabled",
    "load_checkpoint",
    "load_tensor",
    "make_result",
    "no_grad",
    "ops",
    "parameter",
    "precision",
    "save_checkpoint",
    "save_tensor",
    "set_dtype",
]
