"""
Axial slicing of 3D volumes into 2D segmentation samples.

A volume file is a DBSM container with tensors ``image`` and ``mask``, both
``[Dz, H, W]``.
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from dual_branch_sam.data.dataset import SegmentationSample, mask_box
from dual_branch_sam.data.transforms import resize_bilinear, resize_mask
from dual_branch_sam.exceptions import ContractError, DimensionError, FormatError
from dual_branch_sam.tensor.serialization import read_tensor_map
from dual_branch_sam.transformers import IntensityTransformer

logger = logging.getLogger(__name__)


def rescale_unit(volume: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1] over the whole volume; a constant volume maps to zeros."""
    lo, hi = float(volume.min()), float(volume.max())
    if hi <= lo:
        return np.zeros_like(volume, dtype=np.float64)
    return (volume - lo) / (hi - lo)


def volume_slice_axial(
    volume: np.ndarray,
    mask: np.ndarray,
    min_fg: int,
    size: int,
    stem: str = "volume",
    formula: Optional[str] = None,
) -> List[SegmentationSample]:
    """
    Cut a volume into 2D samples along its first axis.

    Parameters
    ----------
    volume, mask : np.ndarray
        ``[Dz, H, W]`` intensities and binary labels.
    min_fg : int
        Slices whose mask, resized to ``size``, has fewer foreground pixels
        are dropped.
    size : int
        Output side length; slices are resized with :func:`resize_bilinear`.
    stem : str
        Sample ids are ``<stem>_<slice index>``.
    formula : str, optional
        Intensity formula in ``x`` applied before rescaling.

    Raises
    ------
    ContractError
        If the volume has no voxels.
    DimensionError
        If volume and mask shapes differ or are not 3D.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask)
    if volume.size == 0:
        raise ContractError(f"{stem}: empty volume {volume.shape}")
    if volume.ndim != 3 or mask.shape != volume.shape:
        raise DimensionError(f"{stem}: volume {volume.shape} vs mask {mask.shape}")

    if formula:
        volume = IntensityTransformer(formula).transform(volume)
    volume = rescale_unit(volume)

    samples = []
    for z in range(volume.shape[0]):
        gt = resize_mask((mask[z] > 0).astype(np.float64), size)
        foreground = int(gt.sum())
        if foreground < min_fg:
            logger.debug(f"{stem}: dropping slice {z} ({foreground} foreground pixels at {size}x{size})")
            continue
        image = resize_bilinear(np.repeat(volume[z][None], 3, axis=0), (size, size))
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(SegmentationSample(image, gt, mask_box(gt), f"{stem}_{z:04d}").validate())
    logger.info(f"{stem}: kept {len(samples)} of {volume.shape[0]} slices")
    return samples


def read_volume(path: Union[str, Path]):
    """
    Returns
    -------
    tuple
        ``(image, mask)`` arrays of a volume file.
    """
    tensors = read_tensor_map(path)
    if "image" not in tensors or "mask" not in tensors:
        raise FormatError(f"{path}: volume files need 'image' and 'mask' tensors, found {sorted(tensors)}")
    return tensors["image"], tensors["mask"]


def slice_volume_files(paths, min_fg: int, size: int, formula: Optional[str] = None) -> List[SegmentationSample]:
    """Slice every volume file; ids use the file stem."""
    samples = []
    for path in paths:
        path = Path(path)
        image, mask = read_volume(path)
        samples.extend(volume_slice_axial(image, mask, min_fg, size, stem=path.stem, formula=formula))
    return samples
