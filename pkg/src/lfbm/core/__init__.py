from .gradcheck import finite_diff_grad, finite_diff_input, relative_error
from .nn import MLP
from .optim import AdamState, adam_step
from .params import ParamGroup
from .tensor import Tensor, as_tensor, backward, grad

__all__ = [
    "Tensor", "as_tensor", "backward", "grad", "ParamGroup", "AdamState", "adam_step",
    "finite_diff_grad", "finite_diff_input", "relative_error", "MLP",
]
