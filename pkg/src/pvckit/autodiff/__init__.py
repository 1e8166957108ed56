from pvckit.autodiff.conv import (
    conv3d,
    conv3d_transpose,
    conv_output_shape,
    conv_transpose_output_shape,
)
from pvckit.autodiff.gradcheck import check_gradients, numeric_grad, relative_error
from pvckit.autodiff.tensor import (
    Tape,
    TapeEntry,
    Tensor,
    abs_,
    active_tape,
    add,
    as_tensor,
    backward,
    box_mean,
    channel_mix,
    concat,
    div,
    fully_connected,
    global_avg_pool,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    slice_,
    square,
    sub,
    sum_,
    take,
    transpose,
)

__all__ = [
    "Tape",
    "TapeEntry",
    "Tensor",
    "abs_",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "box_mean",
    "channel_mix",
    "check_gradients",
    "concat",
    "conv3d",
    "conv3d_transpose",
    "conv_output_shape",
    "conv_transpose_output_shape",
    "div",
    "fully_connected",
    "global_avg_pool",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numeric_grad",
    "pad",
    "relative_error",
    "relu",
    "reshape",
    "scalar_mul",
    "sigmoid",
    "slice_",
    "square",
    "sub",
    "sum_",
    "take",
    "transpose",
]
