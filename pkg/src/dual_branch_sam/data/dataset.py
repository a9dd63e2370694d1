"""
Segmentation samples and the on-disk dataset layout.

A dataset directory holds ``manifest.csv`` (``id,image_path,mask_path,x0,y0,x1,y1``,
paths relative to the directory) plus one DBSM file per image (tensor
``image``, ``[3, H, W]`` in [0, 1]) and per mask (tensor ``mask``, ``[H, W]``
with values 0/1).
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

from dual_branch_sam.exceptions import ContractError, FormatError
from dual_branch_sam.model.prompt_decoder import BoxPrompt
from dual_branch_sam.tensor.serialization import TensorRecord, read_tensor_map, write_tensors

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["id", "image_path", "mask_path", "x0", "y0", "x1", "y1"]


@dataclass
class SegmentationSample:
    image: np.ndarray
    gt_mask: np.ndarray
    box: BoxPrompt
    id: str

    @property
    def size(self) -> int:
        return self.image.shape[-1]

    def validate(self) -> "SegmentationSample":
        """
        Raises
        ------
        ContractError
            On bad shapes, intensities outside [0, 1], a non-binary mask, an
            invalid box or a box missing the foreground.
        """
        if self.image.ndim != 3 or self.image.shape[0] != 3 or self.image.shape[1:] != self.gt_mask.shape:
            raise ContractError(f"{self.id}: image {self.image.shape} vs mask {self.gt_mask.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ContractError(f"{self.id}: intensities outside [0, 1]")
        if not np.isin(self.gt_mask, (0, 1)).all():
            raise ContractError(f"{self.id}: mask is not binary")
        height, width = self.gt_mask.shape
        self.box.validate(width, height)
        if self.gt_mask.any():
            x0, y0 = int(np.floor(self.box.x0)), int(np.floor(self.box.y0))
            x1, y1 = int(np.ceil(self.box.x1)), int(np.ceil(self.box.y1))
            if not self.gt_mask[y0:y1, x0:x1].any():
                raise ContractError(f"{self.id}: box {self.box.as_tuple()} encloses no foreground")
        return self


def mask_box(mask: np.ndarray) -> BoxPrompt:
    """Tight pixel box ``[x0, x1) x [y0, y1)`` of the foreground; the whole image when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return BoxPrompt(0.0, 0.0, float(mask.shape[1]), float(mask.shape[0]))
    return BoxPrompt(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def write_dataset(directory: Union[str, Path], samples: Iterable[SegmentationSample]) -> Path:
    """Write samples and their manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    count = 0
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for sample in samples:
            image_path = f"images/{sample.id}.dbsm"
            mask_path = f"masks/{sample.id}.dbsm"
            write_tensors(directory / image_path, [TensorRecord("image", sample.image)])
            write_tensors(directory / mask_path, [TensorRecord("mask", sample.gt_mask)])
            writer.writerow([sample.id, image_path, mask_path, *(repr(float(v)) for v in sample.box.as_tuple())])
            count += 1
    logger.info(f"Wrote {count} samples to {directory}")
    return manifest


def read_manifest(directory: Union[str, Path]) -> List[dict]:
    """
    Raises
    ------
    FormatError
        When the manifest is missing or malformed.
    """
    manifest = Path(directory) / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    with open(manifest, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(f"{manifest}: expected header {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        rows = list(reader)
    ids = [row["id"] for row in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{manifest}: duplicate sample ids")
    return rows


def load_dataset(directory: Union[str, Path]) -> List[SegmentationSample]:
    """Read every sample of a dataset directory, in manifest order."""
    directory = Path(directory)
    samples = []
    for row in read_manifest(directory):
        try:
            box = BoxPrompt(*(float(row[k]) for k in ("x0", "y0", "x1", "y1")))
        except ValueError as e:
            raise FormatError(f"{directory}: bad box for {row['id']}: {e}")
        image = read_tensor_map(directory / row["image_path"]).get("image")
        mask = read_tensor_map(directory / row["mask_path"]).get("mask")
        if image is None or mask is None:
            raise FormatError(f"{directory}: sample {row['id']} lacks an 'image' or 'mask' tensor")
        samples.append(SegmentationSample(image, mask, box, row["id"]).validate())
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    if not samples:
        logger.warning(f"Dataset {directory} is empty")
    return samples
