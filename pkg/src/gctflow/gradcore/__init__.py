from .checkpoint import load_checkpoint, save_checkpoint
from .module import Module, he_uniform, param
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tape,
    Tensor,
    abs_,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    conv_time,
    elu,
    hadamard,
    leaky_relu,
    matmul,
    mean,
    no_grad,
    pad_left,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    tanh,
    tape_scope,
    transpose,
    zero_grad,
)
