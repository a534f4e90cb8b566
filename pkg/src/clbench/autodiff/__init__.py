from .gradcheck import GradCheckReport, grad_check
from .nn import (conv2d, dense_affine, l2_normalize, log_softmax, maxpool2, relu, softmax,
                 soft_distill_loss, softmax_xent)
from .optim import SGD, sgd_momentum_step
from .tensor import (GradientMap, Tape, Tensor, active_tape, add, backward, flatten, mean, mul,
                     no_grad, reshape, square, sub, take_columns, tsum, using_tape)

__all__ = [
    "GradCheckReport", "GradientMap", "SGD", "Tape", "Tensor", "active_tape", "add", "backward",
    "conv2d", "dense_affine", "flatten", "grad_check", "l2_normalize", "log_softmax", "maxpool2",
    "mean", "mul", "no_grad", "relu", "reshape", "sgd_momentum_step", "soft_distill_loss",
    "softmax", "softmax_xent", "square", "sub", "take_columns", "tsum", "using_tape",
]
