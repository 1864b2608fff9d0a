from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    backward,
    add,
    sub,
    mul,
    scale,
    add_bias,
    relu,
    gelu,
    mask_fill,
    matmul,
    transpose,
    reshape,
    concat,
    getitem,
    embedding_lookup,
    sum_all,
    mean,
    masked_mean,
    softmax,
    layer_norm,
    cross_entropy,
    linear,
    stack_rows,
)
from .params import (
    ParamStore,
    CheckpointError,
    adam_step,
    grad_check,
    save_checkpoint,
    read_checkpoint,
    load_into,
)
