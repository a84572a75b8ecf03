"""Minimal reverse-mode differentiable kernels.

The package trains a small two-stage detector with nothing but numpy, so this
subpackage provides the few kernels that need gradients: dense linear algebra,
3x3 convolution, activations, max reductions, bilinear sampling, the pillar
scatter, losses, and an Adam optimizer. Every backward pass is covered by the
finite-difference suite in ``gradcheck``.
"""

from .tensor import Tensor, concat  # noqa: F401
from .ops import (  # noqa: F401
    bilinear_sample,
    conv2d,
    gather_points,
    linear,
    masked_max,
    scatter_pillars,
    smooth_l1,
    softmax_cross_entropy,
    upsample2x,
)
from .optim import Adam, lr_schedule  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
