"""
Resampling and batch assembly for the two encoder resolutions.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dual_branch_sam.config import ModelConfig
from dual_branch_sam.data.dataset import SegmentationSample
from dual_branch_sam.exceptions import DimensionError
from dual_branch_sam.model.prompt_decoder import BoxPrompt, perturb_box
from dual_branch_sam.tensor import Tensor, sample_bilinear_array

logger = logging.getLogger(__name__)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized ``(x, y)`` centers of an ``height x width`` grid, row-major, ``[H * W, 2]``."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def resize_bilinear(image: Union[np.ndarray, Tensor], out: Tuple[int, int]) -> np.ndarray:
    """
    Resample ``[C, H, W]`` to ``[C, H', W']`` with the align-corners-false
    convention of :func:`bilinear_sample`; coordinates are clamped at the
    border so constant images stay constant. The identity size returns an
    exact copy.
    """
    array = image.data if isinstance(image, Tensor) else np.asarray(image)
    if array.ndim != 3:
        raise DimensionError(f"resize_bilinear expects [C, H, W], got {array.shape}")
    height, width = out
    if array.shape[1:] == (height, width):
        return array.copy()
    sampled = sample_bilinear_array(array[None], pixel_centers(height, width)[None], clamp=True)
    return sampled[0].T.reshape(array.shape[0], height, width)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a binary mask, thresholded at 0.5."""
    resized = resize_bilinear(np.asarray(mask, dtype=np.float64)[None], (size, size))[0]
    return (resized >= 0.5).astype(np.float32)


@dataclass
class Batch:
    image_vit: Tensor
    image_conv: Tensor
    boxes: List[BoxPrompt]
    targets: np.ndarray
    ids: List[str]


def prepare_batch(samples: Sequence[SegmentationSample], config: ModelConfig,
                  rng: Optional[np.random.Generator] = None) -> Batch:
    """
    Resize every sample to the ViT and conv resolutions, move its box into the
    ViT frame (jittered by :func:`perturb_box` when ``rng`` is given) and
    resize its mask to the decoder output size.
    """
    size_vit, size_conv, size_mask = config.image_size_vit, config.image_size_conv, config.mask_size
    dtype = config.dtype
    vit, conv, targets, boxes = [], [], [], []
    for sample in samples:
        vit.append(resize_bilinear(sample.image, (size_vit, size_vit)))
        conv.append(resize_bilinear(sample.image, (size_conv, size_conv)))
        targets.append(resize_mask(sample.gt_mask, size_mask)[None])
        height, width = sample.gt_mask.shape
        box = sample.box.scaled(size_vit / width, size_vit / height)
        if rng is not None:
            box = perturb_box(box, config.max_shift, size_vit, rng)
        boxes.append(box)
    return Batch(
        image_vit=Tensor(np.stack(vit).astype(dtype)),
        image_conv=Tensor(np.stack(conv).astype(dtype)),
        boxes=boxes,
        targets=np.stack(targets).astype(dtype),
        ids=[s.id for s in samples],
    )
