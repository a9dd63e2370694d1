"""
Evaluation metrics on binary masks (Dice similarity and normalized surface
distance) and the CSV report they are collected in.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from dual_branch_sam.exceptions import DimensionError, FormatError

logger = logging.getLogger(__name__)

_FOUR_NEIGHBORS = generate_binary_structure(2, 1)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"metric: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def dsc_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2 |P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor in the background or outside the image."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~binary_erosion(mask, structure=_FOUR_NEIGHBORS, border_value=0)


def surface_extract(mask: np.ndarray) -> np.ndarray:
    """Boundary pixel coordinates ``[K, 2]`` as ``(row, col)``, row-major order."""
    return np.argwhere(surface_mask(mask))


def nsd_metric(pred: np.ndarray, gt: np.ndarray, tolerance: float = 1.0) -> float:
    """
    Normalized surface distance at ``tolerance`` pixels.

    The fraction of boundary pixels of either mask lying within ``tolerance``
    (Euclidean) of the other mask's boundary. Both masks empty gives 1.0;
    exactly one empty gives 0.0.
    """
    pred, gt = _check_pair(pred, gt)
    surface_pred = surface_mask(pred)
    surface_gt = surface_mask(gt)
    n_pred = int(surface_pred.sum())
    n_gt = int(surface_gt.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    # distance of every pixel to the nearest boundary pixel of the other mask
    to_gt = distance_transform_edt(~surface_gt)
    to_pred = distance_transform_edt(~surface_pred)
    close_pred = int((to_gt[surface_pred] <= tolerance).sum())
    close_gt = int((to_pred[surface_gt] <= tolerance).sum())
    return (close_pred + close_gt) / (n_pred + n_gt)


def sample_group(sample_id: str) -> str:
    """Group of a ``<group>_<index>`` sample id (the whole id when there is no underscore)."""
    return sample_id.rsplit("_", 1)[0] if "_" in sample_id else sample_id


@dataclass
class SampleMetrics:
    id: str
    dsc: float
    nsd: float


@dataclass
class MetricsReport:
    per_sample: List[SampleMetrics] = field(default_factory=list)

    def add(self, sample_id: str, dsc: float, nsd: float):
        self.per_sample.append(SampleMetrics(sample_id, float(dsc), float(nsd)))

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([s.dsc for s in self.per_sample])) if self.per_sample else math.nan

    @property
    def mean_nsd(self) -> float:
        return float(np.mean([s.nsd for s in self.per_sample])) if self.per_sample else math.nan

    def by_id(self) -> Dict[str, SampleMetrics]:
        return {s.id: s for s in self.per_sample}

    def group_means(self) -> Dict[str, Tuple[int, float, float]]:
        """``group -> (count, mean dsc, mean nsd)``, groups in first-seen order."""
        groups: Dict[str, List[SampleMetrics]] = {}
        for s in self.per_sample:
            groups.setdefault(sample_group(s.id), []).append(s)
        return {
            name: (len(rows), float(np.mean([r.dsc for r in rows])), float(np.mean([r.nsd for r in rows])))
            for name, rows in groups.items()
        }

    def write_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "dsc", "nsd"])
            for s in self.per_sample:
                writer.writerow([s.id, repr(s.dsc), repr(s.nsd)])
            writer.writerow(["MEAN", repr(self.mean_dsc), repr(self.mean_nsd)])
        logger.info(f"Wrote metrics report ({len(self.per_sample)} samples) to {path}")

    def write_groups_csv(self, path: Union[str, Path]):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["group", "count", "dsc", "nsd"])
            for name, (count, dsc, nsd) in self.group_means().items():
                writer.writerow([name, count, repr(dsc), repr(nsd)])
        logger.info(f"Wrote per-group report to {path}")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> Tuple["MetricsReport", Tuple[float, float]]:
        """
        Parse a report written by :meth:`write_csv`.

        Returns
        -------
        tuple
            The report and the ``(dsc, nsd)`` of its MEAN row.
        """
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["id", "dsc", "nsd"] or rows[-1][:1] != ["MEAN"]:
            raise FormatError(f"{path}: not a metrics report")
        report = cls()
        try:
            for sample_id, dsc, nsd in rows[1:-1]:
                report.add(sample_id, float(dsc), float(nsd))
            mean = (float(rows[-1][1]), float(rows[-1][2]))
        except ValueError as e:
            raise FormatError(f"{path}: malformed metrics row: {e}")
        return report, mean
