from dual_branch_sam.tensor.tensor import (
    Node,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    current_tape,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    record,
    reshape,
    sub,
    tensor_sum,
    transpose,
)
from dual_branch_sam.tensor.kernels import (
    batch_norm,
    bilinear_sample,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    drop_path,
    dropout,
    gelu,
    layer_norm,
    linear,
    relu,
    sample_bilinear_array,
    sigmoid,
    softmax,
)
from dual_branch_sam.tensor.gradcheck import analytic_gradient, finite_diff_check
