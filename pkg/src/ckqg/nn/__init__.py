from .tensor import NumericsError, ShapeError, Tensor
from .params import ParameterSet
from .optim import Adam
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "GradCheckReport",
    "NumericsError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
]
