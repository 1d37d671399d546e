from .tensor import (
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    conv1d_transposed,
    conv_out_len,
    conv_transposed_out_len,
    div,
    layer_norm,
    linear,
    log10,
    matmul,
    mean,
    mul,
    no_grad,
    passthrough_grad,
    relu,
    reshape,
    scale,
    sin,
    slice_,
    snake,
    softmax,
    square,
    stop_gradient,
    sub,
    sum_,
    tanh,
    transpose,
)
from .optim import Adam, AdamState, PlateauHalving, adam_step
from .gradcheck import GradCheckReport, grad_check
from . import losses
