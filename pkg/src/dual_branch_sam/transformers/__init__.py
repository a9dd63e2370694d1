from dual_branch_sam.transformers.transformer import IntensityTransformer

__all__ = ["IntensityTransformer"]
