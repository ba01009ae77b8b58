"""Small reverse-mode autodiff engine over numpy arrays."""

from gendeblur.diffcore.tensor import Tape, Tensor, active_tape, as_tensor, backward, default_dtype, precision
from gendeblur.diffcore.ops import (
    absolute,
    add,
    batchnorm_train,
    conv2d,
    conv2d_full,
    conv_transpose2d,
    dense,
    exp,
    maxpool,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    split_last,
    square,
    sub,
    take,
    transpose,
    tsum,
    tv_norm,
    upsample_nn,
)

conv_layer = conv2d
convT_layer = conv_transpose2d

__all__ = [
    "Tape", "Tensor", "active_tape", "as_tensor", "backward", "default_dtype", "precision",
    "absolute", "add", "batchnorm_train", "conv2d", "conv2d_full", "conv_layer",
    "convT_layer", "conv_transpose2d", "dense", "exp", "maxpool", "mean", "mul", "neg",
    "relu", "reshape", "sigmoid", "split_last", "square", "sub", "take", "transpose",
    "tsum", "tv_norm", "upsample_nn",
]
