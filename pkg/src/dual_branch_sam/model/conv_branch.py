"""
Light-weight convolution branch on the low-resolution input.
"""

import logging

import numpy as np

from dual_branch_sam.config import ConvBranchConfig
from dual_branch_sam.exceptions import DimensionError
from dual_branch_sam.model.module import BatchNorm2d, Conv2d, Module, ModuleList
from dual_branch_sam.tensor import Tensor, relu

logger = logging.getLogger(__name__)

# (top, bottom, left, right): a 3x3 stride-2 window tiles an even extent exactly
STRIDED_PAD = (1, 0, 1, 0)


class LightweightConvBlock(Module):
    """
    Two 3x3 and three 1x1 convolutions; the first four are followed by
    BatchNorm and ReLU, the fifth is a plain projection.

    Channel schedule ``3 -> D/2 -> D -> D -> D -> D``; both 3x3 layers use
    stride 2 so the output grid is a quarter of the input extent.
    """

    def __init__(self, config: ConvBranchConfig, rng: np.random.Generator, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1, dtype="float32"):
        super().__init__()
        self.image_size = config.image_size_conv
        d = config.out_channels
        widths = [3, max(d // 2, 1), d, d, d, d]
        kernels = [3, 3, 1, 1, 1]
        self.convs = ModuleList()
        self.norms = ModuleList()
        for i, (kernel, stride) in enumerate(zip(kernels, config.strides)):
            pad = STRIDED_PAD if kernel == 3 else 0
            self.convs.append(Conv2d(widths[i], widths[i + 1], kernel, rng, stride=stride, pad=pad, dtype=dtype))
            if i < 4:
                self.norms.append(BatchNorm2d(widths[i + 1], bn_eps, bn_momentum, dtype))

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(f"conv branch expects [B, 3, {self.image_size}, {self.image_size}], got {image.shape}")
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = relu(self.norms[i](x))
        return x
