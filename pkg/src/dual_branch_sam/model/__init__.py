from dual_branch_sam.model.module import Module, ModuleList, Parameter
from dual_branch_sam.model.vit_branch import (
    ChannelAttentionBlock,
    PatchEmbed,
    ViTBlock,
    ViTBranch,
    ViTFeature,
)
from dual_branch_sam.model.conv_branch import LightweightConvBlock
from dual_branch_sam.model.cross_fusion import (
    BilateralCrossAttentionBlock,
    DeformableAttention,
    DualBranchState,
    FusionGate,
    ViTConvFusion,
    reference_points,
)
from dual_branch_sam.model.prompt_decoder import (
    BoxPrompt,
    MaskDecoder,
    PromptEmbedding,
    PromptEncoder,
    perturb_box,
)
from dual_branch_sam.model.db_sam import DbSamModel, checkpoint_load, checkpoint_save
