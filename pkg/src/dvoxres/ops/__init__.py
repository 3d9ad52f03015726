from .conv import ConvSpec, col2im, conv3d_backward, conv3d_forward, im2col
from .deform import DeformableConvSpec, deformable_conv3d_backward, deformable_conv3d_forward
from .functional import (
    bce_with_logits,
    bce_with_logits_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    sigmoid,
)
from .norm import batchnorm_backward, batchnorm_forward
from .sampling import sample, sample_backward, trilinear_sample, trilinear_sample_backward

__all__ = [
    "ConvSpec",
    "DeformableConvSpec",
    "batchnorm_backward",
    "batchnorm_forward",
    "bce_with_logits",
    "bce_with_logits_backward",
    "col2im",
    "conv3d_backward",
    "conv3d_forward",
    "deformable_conv3d_backward",
    "deformable_conv3d_forward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "im2col",
    "linear",
    "linear_backward",
    "relu",
    "relu_backward",
    "sample",
    "sample_backward",
    "sigmoid",
    "trilinear_sample",
    "trilinear_sample_backward",
]
