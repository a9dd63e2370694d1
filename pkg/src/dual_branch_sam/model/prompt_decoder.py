"""
Box prompts, the frozen prompt encoder and the minimal mask decoder.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dual_branch_sam.exceptions import ContractError, DimensionError
from dual_branch_sam.model.module import (
    MLP,
    ConvTranspose2d,
    LayerNorm,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
)
from dual_branch_sam.model.vit_branch import tokens_to_map
from dual_branch_sam.tensor import Tensor, concat, gelu

logger = logging.getLogger(__name__)

# box perturbation magnitudes are quoted for this input extent
REFERENCE_EXTENT = 256


@dataclass(frozen=True)
class BoxPrompt:
    """Pixel box ``[x0, x1) x [y0, y1)`` in the coordinate frame of the image it prompts."""

    x0: float
    y0: float
    x1: float
    y1: float

    def is_valid(self, width: float, height: float) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def validate(self, width: float, height: float) -> "BoxPrompt":
        if not self.is_valid(width, height):
            raise ContractError(f"invalid box {self.as_tuple()} for a {width}x{height} image")
        return self

    def scaled(self, factor_x: float, factor_y: float) -> "BoxPrompt":
        return BoxPrompt(self.x0 * factor_x, self.y0 * factor_y, self.x1 * factor_x, self.y1 * factor_y)

    def as_tuple(self):
        return self.x0, self.y0, self.x1, self.y1


@dataclass
class PromptEmbedding:
    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != 2:
            raise DimensionError(f"prompt embedding must be [B, 2, D], got {self.tokens.shape}")


def shift_range(max_shift: float, image_size: int) -> int:
    """Largest integer shift for an image of ``image_size`` pixels."""
    return int(round(max_shift * image_size / REFERENCE_EXTENT))


def draw_shifts(max_shift: float, image_size: int, rng: np.random.Generator) -> np.ndarray:
    """Four independent uniform integers in ``[-s, s]``."""
    s = shift_range(max_shift, image_size)
    return rng.integers(-s, s + 1, size=4)


def _order_and_expand(lo: float, hi: float, extent: float):
    lo, hi = min(lo, hi), max(lo, hi)
    if hi - lo < 1:
        if lo + 1 <= extent:
            hi = lo + 1
        else:
            lo, hi = extent - 1, extent
    return lo, hi


def perturb_box(box: BoxPrompt, max_shift: float, image_size: int, rng: np.random.Generator,
                height: int = None) -> BoxPrompt:
    """
    Jitter every coordinate of ``box`` by an independent integer in ``[-s, s]``,
    ``s = round(max_shift * image_size / 256)``.

    The result is clamped to the image, re-ordered so ``x0 < x1`` and
    ``y0 < y1``, and widened to at least one pixel when it collapses.

    Parameters
    ----------
    box : BoxPrompt
        Valid box in the frame of a ``image_size`` wide image.
    max_shift : float
        Maximum shift in pixels at the 256-pixel reference extent.
    image_size : int
        Image width (and height unless ``height`` is given).
    rng : np.random.Generator
        Explicit random source.
    """
    height = image_size if height is None else height
    if max_shift <= 0:
        return box
    dx0, dy0, dx1, dy1 = draw_shifts(max_shift, image_size, rng)
    x0 = float(np.clip(box.x0 + dx0, 0, image_size))
    x1 = float(np.clip(box.x1 + dx1, 0, image_size))
    y0 = float(np.clip(box.y0 + dy0, 0, height))
    y1 = float(np.clip(box.y1 + dy1, 0, height))
    x0, x1 = _order_and_expand(x0, x1, image_size)
    y0, y1 = _order_and_expand(y0, y1, height)
    return BoxPrompt(x0, y0, x1, y1)


class PromptEncoder(Module):
    """
    Box corners through a fixed random-Fourier positional encoding plus a
    corner-type embedding (top-left, bottom-right). Everything here is frozen.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype="float32"):
        super().__init__()
        if dim % 2:
            raise DimensionError(f"prompt encoder width {dim} must be even")
        self.gaussian = Parameter(rng.normal(0.0, 1.0, size=(2, dim // 2)).astype(dtype), frozen=True)
        self.corner_embed = Parameter(rng.normal(0.0, 1.0, size=(2, dim)).astype(dtype), frozen=True)

    def fourier(self, coords: np.ndarray) -> np.ndarray:
        """Encode normalized ``(x, y)`` positions in ``[0, 1]`` -> ``[..., D]``."""
        projected = (2.0 * coords - 1.0) @ self.gaussian.data * (2.0 * math.pi)
        return np.concatenate([np.sin(projected), np.cos(projected)], axis=-1).astype(self.gaussian.dtype)

    def dense_pe(self, grid: int) -> Tensor:
        """Encoding of every cell center of a ``grid x grid`` map, ``[grid * grid, D]``."""
        centers = (np.arange(grid) + 0.5) / grid
        ys, xs = np.meshgrid(centers, centers, indexing="ij")
        return Tensor(self.fourier(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)))

    def forward(self, boxes: Sequence[BoxPrompt], image_size: int) -> PromptEmbedding:
        corners = np.array(
            [[[b.x0, b.y0], [b.x1, b.y1]] for b in (box.validate(image_size, image_size) for box in boxes)],
            dtype=np.float64,
        ).reshape(len(boxes), 2, 2)
        encoded = Tensor(self.fourier(corners / image_size))
        return PromptEmbedding(encoded + self.corner_embed)


class TwoWayBlock(Module):
    """Token self-attention, token-to-image attention, image-to-token attention, token MLP."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 drop_rate: float = 0.0, ln_eps: float = 1e-6, dtype="float32"):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, ln_eps, dtype)
        self.cross_token_to_image = MultiHeadAttention(dim, num_heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, ln_eps, dtype)
        self.cross_image_to_token = MultiHeadAttention(dim, num_heads, rng, dtype=dtype)
        self.norm3 = LayerNorm(dim, ln_eps, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng, drop_rate, dtype=dtype)
        self.norm4 = LayerNorm(dim, ln_eps, dtype)

    def forward(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))
        q = queries + query_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, keys + key_pe, keys))
        q = queries + query_pe
        keys = self.norm3(keys + self.cross_image_to_token(keys + key_pe, q, queries))
        queries = self.norm4(queries + self.mlp(queries))
        return queries, keys


class MaskDecoder(Module):
    """
    One learned mask token plus the two prompt tokens go through two
    two-way rounds and a final token-to-image attention. The image embedding
    is upsampled x4 by two stride-2 transposed convolutions and the logit at
    each pixel is its dot product with a hypernetwork MLP of the mask token.

    Output ``[B, 1, 4 * grid, 4 * grid]``.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 drop_rate: float = 0.0, zero_init: bool = True, ln_eps: float = 1e-6, dtype="float32",
                 depth: int = 2):
        super().__init__()
        self.dim = dim
        self.mask_token = Parameter(rng.normal(0.0, 1.0, size=(1, 1, dim)).astype(dtype))
        self.layers = ModuleList(
            TwoWayBlock(dim, num_heads, rng, mlp_ratio, drop_rate, ln_eps, dtype) for _ in range(depth)
        )
        self.final_attn = MultiHeadAttention(dim, num_heads, rng, dtype=dtype)
        self.final_norm = LayerNorm(dim, ln_eps, dtype)
        self.upscale1 = ConvTranspose2d(dim, dim // 4, rng, dtype)
        self.upscale2 = ConvTranspose2d(dim // 4, dim // 8, rng, dtype)
        self.hyper_mlp = MLP(dim, dim, dim // 8, rng, drop_rate=0.0, zero_out=zero_init, dtype=dtype)

    def forward(self, image_embed: Tensor, prompt: PromptEmbedding, image_pe: Tensor) -> Tensor:
        b, n, d = image_embed.shape
        grid = int(round(math.sqrt(n)))
        if d != self.dim or grid * grid != n:
            raise DimensionError(f"mask decoder expects [B, grid^2, {self.dim}], got {image_embed.shape}")
        if prompt.tokens.shape != (b, 2, d) or image_pe.shape != (n, d):
            raise DimensionError(
                f"mask decoder: prompt {prompt.tokens.shape} / positional encoding {image_pe.shape} "
                f"do not match image embedding {image_embed.shape}"
            )
        mask_tokens = self.mask_token + Tensor(np.zeros((b, 1, d), dtype=image_embed.dtype))
        tokens = concat([mask_tokens, prompt.tokens], axis=1)

        queries, keys = tokens, image_embed
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, image_pe)
        q = queries + tokens
        queries = self.final_norm(queries + self.final_attn(q, keys + image_pe, keys))

        upscaled = gelu(self.upscale2(gelu(self.upscale1(tokens_to_map(keys, grid)))))
        c, h, w = upscaled.shape[1:]
        hyper = self.hyper_mlp(queries[:, 0, :]).reshape(b, 1, c)
        return (hyper @ upscaled.reshape(b, c, h * w)).reshape(b, 1, h, w)
