from .linalg import as_matrix, matmul, solve_spd
from .losses import kl_divergence, softmax_cross_entropy
from .optim import SGD, Adam, linear_schedule
from .tensor import Tensor, backward

__all__ = [
    "Tensor", "backward", "matmul", "solve_spd", "as_matrix",
    "softmax_cross_entropy", "kl_divergence", "SGD", "Adam", "linear_schedule",
]
