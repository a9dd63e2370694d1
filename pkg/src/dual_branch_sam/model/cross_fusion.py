"""
Interaction between the deep (ViT) and shallow (conv) streams: bilateral
deformable cross-attention after every ViT stage and the final sigmoid-gated
fusion of the two branch outputs.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from dual_branch_sam.config import DeformAttnConfig
from dual_branch_sam.exceptions import DimensionError
from dual_branch_sam.model.module import MLP, LayerNorm, Linear, Module
from dual_branch_sam.model.vit_branch import map_to_tokens, tokens_to_map
from dual_branch_sam.tensor import Tensor, bilinear_sample, drop_path, gelu, sigmoid, softmax

logger = logging.getLogger(__name__)


@dataclass
class DualBranchState:
    """Deep and shallow token streams, both ``[B, N, D]`` on a ``grid x grid`` map."""

    deep: Tensor
    shallow: Tensor
    grid: int

    def validate(self) -> "DualBranchState":
        if self.deep.shape != self.shallow.shape:
            raise DimensionError(f"deep stream {self.deep.shape} and shallow stream {self.shallow.shape} differ")
        if self.deep.ndim != 3 or self.deep.shape[1] != self.grid * self.grid:
            raise DimensionError(f"stream {self.deep.shape} does not fill a {self.grid}x{self.grid} grid")
        return self


@dataclass
class FusionGate:
    logits_deep: Tensor
    logits_shallow: Tensor
    mask: Tensor


def reference_points(grid: Tuple[int, int]) -> Tensor:
    """
    Normalized cell centers ``((j + 0.5) / W, (i + 0.5) / H)`` of an
    ``H x W`` grid in row-major order, shape ``[H * W, 2]``.
    """
    height, width = grid
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    return Tensor(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1))


class DeformableAttention(Module):
    """
    Single-level multi-head deformable attention.

    For head ``h`` and query ``q`` the module predicts ``K`` offsets and ``K``
    softmax weights from the query and returns
    ``sum_k a[h, q, k] * sample(value_h, ref_q + offset[h, q, k])``. Offsets are
    in grid cells (``offset_scale`` cells per unit output), i.e. divided by the
    grid extent per axis before being added to the normalized reference point.
    """

    def __init__(self, config: DeformAttnConfig, rng: np.random.Generator, zero_init: bool = True,
                 dtype="float32"):
        super().__init__()
        d = config.embed_dim
        if d % config.num_heads:
            raise DimensionError(f"deformable attention width {d} not divisible by {config.num_heads} heads")
        self.num_heads = config.num_heads
        self.num_points = config.num_points
        self.head_dim = config.value_dim
        self.offset_scale = config.offset_scale
        self.value_proj = Linear(d, d, rng, dtype=dtype)
        self.sampling_offsets = Linear(d, self.num_heads * self.num_points * 2, rng, zero=True, dtype=dtype)
        self.attention_weights = Linear(d, self.num_heads * self.num_points, rng, dtype=dtype)
        self.output_proj = Linear(d, d, rng, zero=zero_init, dtype=dtype)

    def sampling_plan(self, query: Tensor, ref: Tensor, grid: Tuple[int, int]) -> Tuple[Tensor, Tensor]:
        """
        Sampling locations ``[B, N, heads, K, 2]`` and softmax-normalized
        weights ``[B, N, heads, K]`` for every query.
        """
        b, n, _ = query.shape
        if ref.shape != (n, 2):
            raise DimensionError(f"deformable attention: {n} queries vs reference points {ref.shape}")
        height, width = grid
        offsets = self.sampling_offsets(query).reshape(b, n, self.num_heads, self.num_points, 2)
        normalizer = Tensor(np.array([self.offset_scale / width, self.offset_scale / height], dtype=query.dtype))
        locations = ref.reshape(1, n, 1, 1, 2) + offsets * normalizer
        logits = self.attention_weights(query).reshape(b, n, self.num_heads, self.num_points)
        return locations, softmax(logits, axis=-1)

    def forward(self, query: Tensor, value_map: Tensor, ref: Tensor) -> Tensor:
        b, n, d = query.shape
        if value_map.ndim != 4 or value_map.shape[:2] != (b, d):
            raise DimensionError(f"deformable attention: query {query.shape} vs value map {value_map.shape}")
        _, _, height, width = value_map.shape
        heads, points, dh = self.num_heads, self.num_points, self.head_dim

        value = self.value_proj(map_to_tokens(value_map))
        value = value.reshape(b, height * width, heads, dh).transpose(0, 2, 3, 1).reshape(b * heads, dh, height, width)

        locations, weights = self.sampling_plan(query, ref, (height, width))
        grid = locations.transpose(0, 2, 1, 3, 4).reshape(b * heads, n * points, 2)
        sampled = bilinear_sample(value, grid).reshape(b, heads, n, points, dh)
        weights = weights.transpose(0, 2, 1, 3).reshape(b, heads, n, points, 1)

        out = (sampled * weights).sum(axis=3)
        return self.output_proj(out.transpose(0, 2, 1, 3).reshape(b, n, d))


class BilateralCrossAttentionBlock(Module):
    """
    Deep queries attend to the shallow map and shallow queries to the deep
    map; each direction adds its attention output and then a LN + FFN output
    to its own stream. Both directions read the pre-block state.

    With ``update_shallow`` off only the deep direction exists and the shallow
    stream passes through unchanged (the last stage when nothing reads it).
    """

    def __init__(self, config: DeformAttnConfig, rng: np.random.Generator, mlp_ratio: int = 4,
                 drop_rate: float = 0.0, drop_path_rate: float = 0.0, zero_init: bool = True,
                 ln_eps: float = 1e-6, dtype="float32", update_shallow: bool = True):
        super().__init__()
        d = config.embed_dim
        self.drop_path_rate = drop_path_rate
        self.update_shallow = update_shallow
        self.deep_attn = DeformableAttention(config, rng, zero_init, dtype)
        self.deep_norm = LayerNorm(d, ln_eps, dtype)
        self.deep_ffn = MLP(d, d * mlp_ratio, d, rng, drop_rate, zero_out=zero_init, dtype=dtype)
        if update_shallow:
            self.shallow_attn = DeformableAttention(config, rng, zero_init, dtype)
            self.shallow_norm = LayerNorm(d, ln_eps, dtype)
            self.shallow_ffn = MLP(d, d * mlp_ratio, d, rng, drop_rate, zero_out=zero_init, dtype=dtype)

    def _residual(self, x: Tensor, branch: Tensor) -> Tensor:
        return x + drop_path(branch, self.drop_path_rate, self.training, self.rng)

    def forward(self, state: DualBranchState) -> DualBranchState:
        state.validate()
        grid = state.grid
        ref = reference_points((grid, grid))
        deep_map = tokens_to_map(state.deep, grid)
        shallow_map = tokens_to_map(state.shallow, grid)

        deep = self._residual(state.deep, self.deep_attn(state.deep, shallow_map, ref))
        deep = self._residual(deep, self.deep_ffn(self.deep_norm(deep)))
        if not self.update_shallow:
            return DualBranchState(deep, state.shallow, grid)

        shallow = self._residual(state.shallow, self.shallow_attn(state.shallow, deep_map, ref))
        shallow = self._residual(shallow, self.shallow_ffn(self.shallow_norm(shallow)))
        return DualBranchState(deep, shallow, grid)


class ViTConvFusion(Module):
    """
    Element-wise gate between the two branch outputs::

        M = sigmoid(FC(GELU(FC(F_d))) + FC(GELU(FC(F_s))))
        F = F_d * M + F_s * (1 - M)

    Each branch has its own squeeze/restore pair (ratio ``squeeze_ratio``)
    applied per token.
    """

    def __init__(self, dim: int, squeeze_ratio: int, rng: np.random.Generator, zero_init: bool = True,
                 dtype="float32"):
        super().__init__()
        hidden = max(dim // squeeze_ratio, 1)
        self.deep_squeeze = Linear(dim, hidden, rng, dtype=dtype)
        self.deep_restore = Linear(hidden, dim, rng, zero=zero_init, dtype=dtype)
        self.shallow_squeeze = Linear(dim, hidden, rng, dtype=dtype)
        self.shallow_restore = Linear(hidden, dim, rng, zero=zero_init, dtype=dtype)

    def gate(self, deep: Tensor, shallow: Tensor) -> FusionGate:
        if deep.shape != shallow.shape:
            raise DimensionError(f"fusion: deep {deep.shape} and shallow {shallow.shape} differ")
        logits_deep = self.deep_restore(gelu(self.deep_squeeze(deep)))
        logits_shallow = self.shallow_restore(gelu(self.shallow_squeeze(shallow)))
        return FusionGate(logits_deep, logits_shallow, sigmoid(logits_deep + logits_shallow))

    def forward(self, deep: Tensor, shallow: Tensor) -> Tensor:
        mask = self.gate(deep, shallow).mask
        return deep * mask + shallow * (1.0 - mask)
