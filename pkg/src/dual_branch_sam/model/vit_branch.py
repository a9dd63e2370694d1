"""
Frozen ViT stack with a trainable channel-attention adapter after every
attention block.
"""

import logging
from dataclasses import dataclass

import numpy as np

from dual_branch_sam.config import ViTBranchConfig
from dual_branch_sam.exceptions import DimensionError
from dual_branch_sam.model.module import (
    MLP,
    Conv2d,
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
)
from dual_branch_sam.tensor import Tensor, drop_path, relu, sigmoid

logger = logging.getLogger(__name__)


@dataclass
class ViTFeature:
    """Token sequence ``[B, H_g * W_g, D]`` on a square ``grid``."""

    tokens: Tensor
    grid: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid * self.grid:
            raise DimensionError(f"ViTFeature: {self.tokens.shape} tokens do not fill a {self.grid}x{self.grid} grid")


def tokens_to_map(tokens: Tensor, grid: int) -> Tensor:
    """``[B, N, D]`` -> ``[B, D, grid, grid]``, row-major tokens."""
    b, n, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, grid, grid)


def map_to_tokens(feature_map: Tensor) -> Tensor:
    """``[B, D, H, W]`` -> ``[B, H * W, D]``."""
    b, d, h, w = feature_map.shape
    return feature_map.reshape(b, d, h * w).transpose(0, 2, 1)


class PatchEmbed(Module):
    """Non-overlapping patch projection plus a learned positional embedding."""

    def __init__(self, config: ViTBranchConfig, rng: np.random.Generator, dtype="float32"):
        super().__init__()
        self.image_size = config.image_size_vit
        self.grid = config.grid
        self.proj = Conv2d(3, config.embed_dim, config.patch_size, rng, stride=config.patch_size, dtype=dtype)
        pos = rng.normal(0.0, 0.02, size=(1, config.grid * config.grid, config.embed_dim))
        self.pos_embed = Parameter(pos.astype(dtype))

    def forward(self, image: Tensor) -> ViTFeature:
        if image.ndim != 4 or image.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(f"patch_embed expects [B, 3, {self.image_size}, {self.image_size}], got {image.shape}")
        return ViTFeature(map_to_tokens(self.proj(image)) + self.pos_embed, self.grid)


class ViTBlock(Module):
    """Pre-LN multi-head self-attention and pre-LN MLP, both residual."""

    def __init__(self, config: ViTBranchConfig, rng: np.random.Generator, ln_eps: float = 1e-6, dtype="float32"):
        super().__init__()
        d = config.embed_dim
        self.norm1 = LayerNorm(d, ln_eps, dtype)
        self.attn = MultiHeadAttention(d, config.num_heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, ln_eps, dtype)
        self.mlp = MLP(d, d * config.mlp_ratio, d, rng, dtype=dtype)

    def forward(self, feature: ViTFeature) -> ViTFeature:
        x = feature.tokens
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.mlp(self.norm2(x))
        return ViTFeature(x, feature.grid)


class SqueezeExcitation(Module):
    """Global average pool -> FC(D, D/r) -> ReLU -> FC(D/r, D) -> sigmoid -> channel rescale."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype="float32"):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        squeezed = x.mean(axis=(2, 3))
        scale = sigmoid(self.fc2(relu(self.fc1(squeezed))))
        return x * scale.reshape(b, c, 1, 1)


class ChannelAttentionBlock(Module):
    """
    Local adapter appended to an attention block::

        F_out = F_in + Conv1x1(SE(DWConv3x3(LN(F_in))))

    LN normalizes the channels of each token; the residual branch is subject
    to drop-path. With ``zero_init`` the final 1x1 convolution starts at zero,
    so the block is the identity until it is trained.
    """

    def __init__(self, config: ViTBranchConfig, rng: np.random.Generator, zero_init: bool = True,
                 ln_eps: float = 1e-6, dtype="float32"):
        super().__init__()
        d = config.embed_dim
        self.drop_path_rate = config.drop_path_rate
        self.norm = LayerNorm(d, ln_eps, dtype)
        self.dwconv = DepthwiseConv2d(d, 3, rng, pad=1, dtype=dtype)
        self.se = SqueezeExcitation(d, config.se_reduction, rng, dtype)
        self.proj = Conv2d(d, d, 1, rng, zero=zero_init, dtype=dtype)

    def forward(self, feature: ViTFeature) -> ViTFeature:
        x = feature.tokens
        spatial = tokens_to_map(self.norm(x), feature.grid)
        branch = map_to_tokens(self.proj(self.se(self.dwconv(spatial))))
        branch = drop_path(branch, self.drop_path_rate, self.training, self.rng)
        return ViTFeature(x + branch, feature.grid)


class ViTBranch(Module):
    """
    Patch embedding followed by ``num_stages`` stages of
    ``depth / num_stages`` (attention block, channel attention block) pairs.

    The patch embedding and attention blocks come from ``frozen_rng`` and are
    frozen; adapters come from ``adapter_rng`` and are trainable. Adapters are
    built only when ``use_channel_attention`` is set.
    """

    def __init__(self, config: ViTBranchConfig, frozen_rng: np.random.Generator,
                 adapter_rng: np.random.Generator, use_channel_attention: bool = True,
                 zero_init: bool = True, ln_eps: float = 1e-6, dtype="float32"):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config, frozen_rng, dtype).freeze()
        self.blocks = ModuleList(
            ViTBlock(config, frozen_rng, ln_eps, dtype).freeze() for _ in range(config.depth)
        )
        self.adapters = None
        if use_channel_attention:
            self.adapters = ModuleList(
                ChannelAttentionBlock(config, adapter_rng, zero_init, ln_eps, dtype) for _ in range(config.depth)
            )

    def stage_forward(self, feature: ViTFeature, stage_index: int) -> ViTFeature:
        per_stage = self.config.blocks_per_stage
        for i in range(stage_index * per_stage, (stage_index + 1) * per_stage):
            feature = self.blocks[i](feature)
            if self.adapters is not None:
                feature = self.adapters[i](feature)
        return feature

    def forward(self, image: Tensor) -> ViTFeature:
        feature = self.patch_embed(image)
        for stage in range(self.config.num_stages):
            feature = self.stage_forward(feature, stage)
        return feature

    def frozen_forward(self, image: Tensor) -> ViTFeature:
        """The pretrained ViT alone, adapters skipped."""
        feature = self.patch_embed(image)
        for block in self.blocks:
            feature = block(feature)
        return feature
