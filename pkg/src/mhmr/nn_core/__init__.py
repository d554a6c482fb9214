from . import tensor as ops
from .gradcheck import grad_check, rel_error
from .layers import MLP, Attention, LayerNorm, Linear, ParamStore, attention
from .optim import adam_step
from .tensor import ShapeError, Tensor, backward, no_grad

__all__ = [
    "ops", "Tensor", "ShapeError", "backward", "no_grad", "ParamStore", "Linear",
    "LayerNorm", "MLP", "Attention", "attention", "adam_step", "grad_check", "rel_error",
]
