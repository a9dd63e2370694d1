"""
Finite-difference gradient suite over every differentiable block.

Each case builds a small float64 instance of one block from a fixed seed,
projects its output onto a fixed random tensor to get a scalar, and compares
the backward gradient of that scalar against central differences for the
block inputs and selected parameters (all of them for the adapter). Frozen
blocks are checked through their input only.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dual_branch_sam.config import ModelConfig
from dual_branch_sam.exceptions import ConfigurationError
from dual_branch_sam.losses import bce_loss, dice_loss
from dual_branch_sam.model.conv_branch import STRIDED_PAD, LightweightConvBlock
from dual_branch_sam.model.cross_fusion import (
    BilateralCrossAttentionBlock,
    DeformableAttention,
    DualBranchState,
    ViTConvFusion,
    reference_points,
)
from dual_branch_sam.model.module import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    DepthwiseConv2d,
    LayerNorm,
    MultiHeadAttention,
)
from dual_branch_sam.model.prompt_decoder import BoxPrompt, MaskDecoder, PromptEncoder
from dual_branch_sam.model.vit_branch import ChannelAttentionBlock, ViTBlock, ViTFeature
from dual_branch_sam.tensor import Tensor, bilinear_sample, finite_diff_check
from dual_branch_sam.tensor.gradcheck import analytic_gradient

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
MAX_COORDS = 24
DTYPE = "float64"

# a small architecture shared by every case
SUITE_CONFIG = ModelConfig(
    image_size_vit=32,
    patch_size=8,
    embed_dim=16,
    num_heads=2,
    depth=2,
    num_stages=2,
    se_reduction=4,
    mlp_ratio=2,
    image_size_conv=16,
    deform_heads=2,
    deform_points=2,
    decoder_heads=2,
    drop_rate=0.0,
    drop_path_rate=0.0,
    dtype=DTYPE,
)

Forward = Callable[[], Tensor]
Targets = List[Tuple[str, Tensor]]


@dataclass
class GradCheckResult:
    block: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def _normal(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _conv2d(rng):
    layer = Conv2d(3, 4, 3, rng, stride=2, pad=STRIDED_PAD, dtype=DTYPE)
    x = _normal(rng, 2, 3, 6, 6)
    return (lambda: layer(x)), [("input", x), ("weight", layer.weight)]


def _depthwise_conv2d(rng):
    layer = DepthwiseConv2d(4, 3, rng, pad=1, dtype=DTYPE)
    x = _normal(rng, 2, 4, 5, 5)
    return (lambda: layer(x)), [("input", x), ("weight", layer.weight)]


def _conv_transpose2d(rng):
    layer = ConvTranspose2d(4, 3, rng, dtype=DTYPE)
    x = _normal(rng, 2, 4, 3, 3)
    return (lambda: layer(x)), [("input", x), ("weight", layer.weight)]


def _layer_norm(rng):
    layer = LayerNorm(8, dtype=DTYPE)
    layer.weight.data[...] = rng.normal(1.0, 0.1, size=8)
    x = _normal(rng, 2, 5, 8)
    return (lambda: layer(x)), [("input", x), ("weight", layer.weight)]


def _batch_norm(rng):
    layer = BatchNorm2d(4, dtype=DTYPE)
    x = _normal(rng, 3, 4, 3, 3)
    return (lambda: layer(x)), [("input", x), ("weight", layer.weight)]


def _bilinear_sample(rng):
    image = _normal(rng, 2, 3, 4, 5)
    points = Tensor(rng.uniform(-0.1, 1.1, size=(2, 7, 2)))
    return (lambda: bilinear_sample(image, points)), [("input", image), ("points", points)]


def _attention(rng):
    layer = MultiHeadAttention(8, 2, rng, dtype=DTYPE)
    q = _normal(rng, 2, 3, 8)
    kv = _normal(rng, 2, 5, 8)
    return (lambda: layer(q, kv, kv)), [("query", q), ("key_value", kv), ("q_proj", layer.q_proj.weight)]


def _channel_attention(rng):
    config = SUITE_CONFIG.vit
    block = ChannelAttentionBlock(config, rng, zero_init=False, dtype=DTYPE)
    x = _normal(rng, 2, config.grid * config.grid, config.embed_dim)
    # every adapter parameter: norm, depthwise conv, both SE layers and the projection
    return (lambda: block(ViTFeature(x, config.grid)).tokens), [("input", x), *block.named_parameters()]


def _vit_block(rng):
    config = SUITE_CONFIG.vit
    block = ViTBlock(config, rng, dtype=DTYPE).freeze()
    x = _normal(rng, 2, config.grid * config.grid, config.embed_dim)
    return (lambda: block(ViTFeature(x, config.grid)).tokens), [("input", x)]


def _lightweight_conv(rng):
    config = SUITE_CONFIG.conv
    block = LightweightConvBlock(config, rng, dtype=DTYPE)
    x = Tensor(rng.uniform(size=(2, 3, config.image_size_conv, config.image_size_conv)))
    return (lambda: block(x)), [("input", x), ("convs.1", block.convs[1].weight)]


def _deformable_attention(rng):
    config = SUITE_CONFIG.deform
    grid = SUITE_CONFIG.grid
    layer = DeformableAttention(config, rng, zero_init=False, dtype=DTYPE)
    layer.sampling_offsets.weight.data[...] = rng.normal(0.0, 0.3, size=layer.sampling_offsets.weight.shape)
    query = _normal(rng, 2, grid * grid, config.embed_dim)
    value = _normal(rng, 2, config.embed_dim, grid, grid)
    ref = reference_points((grid, grid))
    targets = [("query", query), ("value", value), ("sampling_offsets", layer.sampling_offsets.weight)]
    return (lambda: layer(query, value, ref)), targets


def _bilateral(rng):
    grid = SUITE_CONFIG.grid
    block = BilateralCrossAttentionBlock(SUITE_CONFIG.deform, rng, SUITE_CONFIG.mlp_ratio, zero_init=False,
                                         dtype=DTYPE)
    deep = _normal(rng, 2, grid * grid, SUITE_CONFIG.embed_dim)
    shallow = _normal(rng, 2, grid * grid, SUITE_CONFIG.embed_dim)

    def forward():
        state = block(DualBranchState(deep, shallow, grid))
        return state.deep * 0.7 + state.shallow

    return forward, [("deep", deep), ("shallow", shallow), ("shallow_ffn.fc1", block.shallow_ffn.fc1.weight)]


def _fusion_gate(rng):
    fusion = ViTConvFusion(8, 2, rng, zero_init=False, dtype=DTYPE)
    deep = _normal(rng, 2, 5, 8)
    shallow = _normal(rng, 2, 5, 8)
    return (lambda: fusion(deep, shallow)), [("deep", deep), ("shallow", shallow),
                                              ("deep_squeeze", fusion.deep_squeeze.weight)]


def _decoder(rng):
    d, grid = SUITE_CONFIG.embed_dim, SUITE_CONFIG.grid
    decoder = MaskDecoder(d, SUITE_CONFIG.decoder_heads, rng, SUITE_CONFIG.mlp_ratio, zero_init=False,
                          dtype=DTYPE)
    encoder = PromptEncoder(d, rng, DTYPE)
    size = SUITE_CONFIG.image_size_vit
    prompt = encoder([BoxPrompt(3.0, 5.0, 20.0, 27.0), BoxPrompt(0.0, 0.0, size, size)], size)
    pe = encoder.dense_pe(grid)
    embed = _normal(rng, 2, grid * grid, d)
    return (lambda: decoder(embed, prompt, pe)), [("image_embedding", embed), ("mask_token", decoder.mask_token)]


def _dice(rng):
    logits = _normal(rng, 2, 1, 6, 6)
    target = (rng.uniform(size=logits.shape) < 0.4).astype(np.float64)
    return (lambda: dice_loss(logits, target)), [("logits", logits)]


def _bce(rng):
    logits = _normal(rng, 2, 1, 6, 6)
    target = (rng.uniform(size=logits.shape) < 0.4).astype(np.float64)
    return (lambda: bce_loss(logits, target)), [("logits", logits)]


CASES: Dict[str, Callable[[np.random.Generator], Tuple[Forward, Targets]]] = {
    "conv2d": _conv2d,
    "depthwise_conv2d": _depthwise_conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "bilinear_sample": _bilinear_sample,
    "attention": _attention,
    "vit_block": _vit_block,
    "channel_attention_block": _channel_attention,
    "lightweight_conv_block": _lightweight_conv,
    "deformable_attention": _deformable_attention,
    "bilateral_block": _bilateral,
    "fusion_gate": _fusion_gate,
    "mask_decoder": _decoder,
    "dice_loss": _dice,
    "bce_loss": _bce,
}


def check_block(name: str, seed: int = 0, inject: bool = False) -> GradCheckResult:
    """
    Run one case. With ``inject`` every analytic gradient is doubled before
    the comparison, which must make the case fail.
    """
    rng = np.random.default_rng(seed)
    forward, targets = CASES[name](rng)
    out = forward()
    projection = None if out.size == 1 else Tensor(rng.normal(size=out.shape))

    def scalar(_: Tensor) -> Tensor:
        y = forward()
        return y if projection is None else (y * projection).sum()

    worst = 0.0
    for label, tensor in targets:
        grad = analytic_gradient(scalar, tensor)
        if inject:
            grad = grad * 2.0
        err = finite_diff_check(scalar, tensor, grad=grad, max_coords=MAX_COORDS, rng=rng)
        logger.debug(f"{name}/{label}: max rel err {err:.3e}")
        worst = max(worst, err)
    return GradCheckResult(name, worst)


def grad_check_suite(blocks: Optional[Sequence[str]] = None, inject: Optional[str] = None,
                     seed: int = 0) -> List[GradCheckResult]:
    """
    Check ``blocks`` (all by default) and log the table.

    Parameters
    ----------
    inject : str, optional
        Name of a block whose analytic gradient is scaled by 2.

    Raises
    ------
    ConfigurationError
        For an unknown block name.
    """
    names = list(blocks) if blocks else list(CASES)
    unknown = [n for n in names + ([inject] if inject else []) if n not in CASES]
    if unknown:
        raise ConfigurationError(f"unknown gradient-check blocks {unknown}; known: {', '.join(CASES)}")
    results = [check_block(name, seed, inject=name == inject) for name in names]
    for r in results:
        logger.info(f"{r.block:<26s} {r.max_rel_err:10.3e}  {'ok' if r.passed else 'FAIL'}")
    return results


def format_table(results: Sequence[GradCheckResult]) -> str:
    lines = [f"{'block':<26s} {'max_rel_err':>11s}  status"]
    lines += [f"{r.block:<26s} {r.max_rel_err:11.3e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    return "\n".join(lines)
