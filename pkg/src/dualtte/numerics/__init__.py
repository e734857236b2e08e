from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .init import glorot_uniform, make_rng
from .optim import AdamState, NonFiniteGradient, adam_step
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d_prepad,
    div,
    gather_rows,
    getitem,
    grad,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
)
