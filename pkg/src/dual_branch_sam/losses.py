"""
Segmentation losses on mask logits: binary cross-entropy, soft Dice and
their unweighted sum.
"""

import logging
from typing import Union

import numpy as np

from dual_branch_sam.exceptions import DimensionError
from dual_branch_sam.tensor import Tensor, record, sigmoid
from dual_branch_sam.tensor.kernels import stable_sigmoid

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5

Target = Union[Tensor, np.ndarray]


def _target_array(logits: Tensor, target: Target) -> np.ndarray:
    array = target.data if isinstance(target, Tensor) else np.asarray(target)
    if array.shape != logits.shape:
        raise DimensionError(f"loss: logits {logits.shape} vs target {array.shape}")
    return array.astype(logits.dtype)


def dice_loss(logits: Tensor, target: Target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`` with ``p = sigmoid(logits)``."""
    t = _target_array(logits, target)
    p = sigmoid(logits)
    intersection = (p * Tensor(t)).sum()
    return 1.0 - (2.0 * intersection + eps) / (p.sum() + (float(t.sum()) + eps))


def bce_loss(logits: Tensor, target: Target) -> Tensor:
    """
    Mean binary cross-entropy in the stable logit form
    ``max(z, 0) - z t + log(1 + exp(-|z|))``.
    """
    t = _target_array(logits, target)
    z = logits.data
    per_pixel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def grad_fn(g):
        return ((stable_sigmoid(z) - t) * (g / n),)

    return record("bce", np.asarray(per_pixel.mean(), dtype=z.dtype), (logits,), grad_fn)


def combined_loss(logits: Tensor, target: Target) -> Tensor:
    return bce_loss(logits, target) + dice_loss(logits, target)
