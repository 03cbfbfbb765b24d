from .tensor import ShapeError, Tensor, as_tensor, backward
from .params import ParamSet, load_params, restore_params, save_params, sgd_step
from . import ops

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "ParamSet",
    "sgd_step",
    "save_params",
    "load_params",
    "restore_params",
    "ops",
]
