from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    expand,
    grad_enabled,
    matmul,
    mean,
    no_grad,
    reshape,
    stack,
    swapaxes,
    transpose,
    tsum,
)
from .functional import (
    bce_with_logits,
    cross_entropy,
    dropout,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    logsigmoid,
    masked_rows,
    relu,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    take_rows,
    tanh,
)
from .optim import Adam, AdamState, adam_step, warmup_linear
from .gradcheck import numeric_grad, relative_error, check_grads
