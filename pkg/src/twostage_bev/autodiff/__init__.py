from . import nn, ops
from .checkpoint import load_tensors, save_tensors
from .ops import (bilinear_sample, concat, conv2d, elementwise, matmul, reduce,
                  softmax, stack)
from .optim import AdamW, AdamWHyper, AdamWState, clip_grad_norm, optimizer_step
from .tensor import (DiffTensor, DimensionError, Tape, default_dtype, no_grad,
                     set_default_dtype, using_dtype)

__all__ = [
    "AdamW", "AdamWHyper", "AdamWState", "DiffTensor", "DimensionError", "Tape",
    "bilinear_sample", "clip_grad_norm", "concat", "conv2d", "default_dtype",
    "elementwise", "load_tensors", "matmul", "nn", "no_grad", "ops",
    "optimizer_step", "reduce", "save_tensors", "set_default_dtype", "softmax",
    "stack", "using_dtype",
]
