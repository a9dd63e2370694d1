"""
The dual-branch model: frozen ViT with adapters, convolution branch,
bilateral cross-attention after every ViT stage, gated fusion, frozen prompt
encoder and trainable mask decoder.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from dual_branch_sam.config import ModelConfig, load_config, save_config
from dual_branch_sam.exceptions import FormatError
from dual_branch_sam.model.conv_branch import LightweightConvBlock
from dual_branch_sam.model.cross_fusion import BilateralCrossAttentionBlock, DualBranchState, ViTConvFusion
from dual_branch_sam.model.module import Module, ModuleList, count_by_prefix
from dual_branch_sam.model.prompt_decoder import BoxPrompt, MaskDecoder, PromptEncoder
from dual_branch_sam.model.vit_branch import ViTBranch, ViTFeature, map_to_tokens
from dual_branch_sam.tensor import Tensor
from dual_branch_sam.tensor.serialization import read_tensors, write_tensors

logger = logging.getLogger(__name__)

# groups drawn from ``pretrained_seed``; everything else comes from the training seed
PRETRAINED_PREFIXES = ("vit.patch_embed.", "vit.blocks.", "prompt_encoder.")


class DbSamModel(Module):
    """
    Parameters
    ----------
    config : ModelConfig
        Validated configuration; the ``use_*`` flags decide which trainable
        components exist.
    init_rng : np.random.Generator
        Source for the trainable parameters.
    pretrained_rng : np.random.Generator, optional
        Source for the frozen ViT and prompt encoder; defaults to
        ``default_rng(config.pretrained_seed)``.
    """

    def __init__(self, config: ModelConfig, init_rng: np.random.Generator,
                 pretrained_rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config.validate()
        dtype = config.dtype
        pretrained_rng = pretrained_rng if pretrained_rng is not None else np.random.default_rng(config.pretrained_seed)

        self.vit = ViTBranch(config.vit, pretrained_rng, init_rng, config.use_channel_attention,
                             config.zero_init, config.ln_eps, dtype)
        self.prompt_encoder = PromptEncoder(config.embed_dim, pretrained_rng, dtype)

        self.conv_branch = None
        if config.use_bilateral or config.use_fusion:
            self.conv_branch = LightweightConvBlock(config.conv, init_rng, config.bn_eps, config.bn_momentum, dtype)
        self.bilateral = None
        if config.use_bilateral:
            # without fusion the shallow stream leaving the last stage is never read
            self.bilateral = ModuleList(
                BilateralCrossAttentionBlock(config.deform, init_rng, config.mlp_ratio, config.drop_rate,
                                             config.drop_path_rate, config.zero_init, config.ln_eps, dtype,
                                             update_shallow=config.use_fusion or stage < config.num_stages - 1)
                for stage in range(config.num_stages)
            )
        self.fusion = None
        if config.use_fusion:
            self.fusion = ViTConvFusion(config.embed_dim, config.fusion_squeeze_ratio, init_rng,
                                        config.zero_init, dtype)
        self.decoder = MaskDecoder(config.embed_dim, config.decoder_heads, init_rng, config.mlp_ratio,
                                   config.drop_rate, config.zero_init, config.ln_eps, dtype)

        for name, (trainable, frozen) in count_by_prefix(self).items():
            logger.debug(f"{name}: {trainable} trainable / {frozen} frozen parameters")
        logger.info(
            f"Built DB-SAM model: {self.parameter_count(frozen=False)} trainable, "
            f"{self.parameter_count(frozen=True)} frozen parameters"
        )

    def encode(self, image_vit: Tensor, image_conv: Tensor) -> Tensor:
        """Fused image embedding ``[B, N, D]``."""
        grid = self.config.grid
        deep = self.vit.patch_embed(image_vit)
        shallow = None
        if self.conv_branch is not None:
            shallow = map_to_tokens(self.conv_branch(image_conv))

        for stage in range(self.config.num_stages):
            deep = self.vit.stage_forward(deep, stage)
            if self.bilateral is not None:
                state = self.bilateral[stage](DualBranchState(deep.tokens, shallow, grid))
                deep = ViTFeature(state.deep, grid)
                shallow = state.shallow

        if self.fusion is not None:
            return self.fusion(deep.tokens, shallow)
        return deep.tokens

    def forward(self, image_vit: Tensor, image_conv: Tensor, boxes: Sequence[BoxPrompt]) -> Tensor:
        """Mask logits ``[B, 1, 4 * grid, 4 * grid]`` for boxes in the ViT input frame."""
        embedding = self.encode(image_vit, image_conv)
        prompt = self.prompt_encoder(boxes, self.config.image_size_vit)
        return self.decoder(embedding, prompt, self.prompt_encoder.dense_pe(self.config.grid))

    # -- pseudo-pretrained weights -------------------------------------------

    def pretrained_records(self):
        return [rec for rec in self.state_records() if rec.name.startswith(PRETRAINED_PREFIXES)]

    def save_pretrained(self, path: Union[str, Path]):
        records = self.pretrained_records()
        write_tensors(path, records)
        logger.info(f"Wrote {len(records)} pretrained tensors to {path}")

    def load_pretrained(self, path: Union[str, Path]):
        """
        Load the frozen ViT and prompt encoder tensors written by
        :meth:`save_pretrained`.

        Raises
        ------
        FormatError
            If the file holds anything but the expected pretrained tensors.
        """
        records = read_tensors(path)
        expected = {rec.name for rec in self.pretrained_records()}
        found = {rec.name for rec in records}
        if found != expected:
            raise FormatError(
                f"{path}: pretrained tensors mismatch (missing {sorted(expected - found)}, "
                f"unexpected {sorted(found - expected)})"
            )
        self.load_records(records, strict=False)
        logger.info(f"Loaded {len(records)} pretrained tensors from {path}")


def config_path_for(checkpoint: Union[str, Path]) -> Path:
    """Sidecar config of a checkpoint: same stem, ``.cfg`` suffix."""
    return Path(checkpoint).with_suffix(".cfg")


def checkpoint_save(model: DbSamModel, path: Union[str, Path]):
    """Write all parameters and buffers (DBSM) plus the config sidecar."""
    path = Path(path)
    write_tensors(path, model.state_records())
    save_config(model.config, config_path_for(path))
    logger.info(f"Saved checkpoint to {path}")


def checkpoint_load(path: Union[str, Path], config: Optional[ModelConfig] = None) -> DbSamModel:
    """
    Rebuild a model from a checkpoint.

    Parameters
    ----------
    path : str or Path
        DBSM checkpoint.
    config : ModelConfig, optional
        Architecture to build; read from the ``.cfg`` sidecar when omitted.

    Raises
    ------
    FormatError
        On a malformed file, a missing sidecar or tensors that do not match the
        architecture.
    """
    path = Path(path)
    records = read_tensors(path)
    if config is None:
        sidecar = config_path_for(path)
        if not sidecar.exists():
            raise FormatError(f"{path}: no config given and no sidecar {sidecar}")
        config = load_config(sidecar)
    model = DbSamModel(config, np.random.default_rng(0))
    model.load_records(records, strict=True)
    logger.info(f"Loaded checkpoint from {path}")
    return model

