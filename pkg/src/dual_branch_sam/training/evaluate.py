"""
Per-sample DSC/NSD evaluation of a trained model.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from dual_branch_sam.data.dataset import SegmentationSample
from dual_branch_sam.data.transforms import prepare_batch, resize_mask
from dual_branch_sam.metrics import MetricsReport, dsc_metric, nsd_metric
from dual_branch_sam.mlflow_utils import RunTracker
from dual_branch_sam.model.db_sam import DbSamModel, checkpoint_load
from dual_branch_sam.tensor import no_grad

logger = logging.getLogger(__name__)

Predictor = Callable[[SegmentationSample], np.ndarray]


def model_predictor(model: DbSamModel) -> Predictor:
    """
    Binary mask at the decoder resolution for one sample with its
    unperturbed box; logits >= 0 (sigmoid >= 0.5) are foreground.
    """

    def predict(sample: SegmentationSample) -> np.ndarray:
        batch = prepare_batch([sample], model.config)
        with no_grad():
            logits = model(batch.image_vit, batch.image_conv, batch.boxes)
        return logits.data[0, 0] >= 0.0

    return predict


def groups_report_path(report: Union[str, Path]) -> Path:
    report = Path(report)
    return report.with_name(f"{report.stem}_groups.csv")


def evaluate(
    model: Optional[DbSamModel],
    samples: Sequence[SegmentationSample],
    tolerance: float = 1.0,
    workers: int = 1,
    report_path: Optional[Union[str, Path]] = None,
    predictor: Optional[Predictor] = None,
    mask_size: Optional[int] = None,
) -> MetricsReport:
    """
    Score every sample and collect the results in dataset order.

    Parameters
    ----------
    model : DbSamModel
        Put in eval mode; may be None when ``predictor`` is given.
    samples : sequence of SegmentationSample
    tolerance : float
        NSD tolerance in pixels.
    workers : int
        Threads scoring samples concurrently against the read-only model.
    report_path : str or Path, optional
        Where to write the CSV report; the per-group summary goes next to it.
    predictor : callable, optional
        Replaces the model's prediction (sample -> binary mask).
    mask_size : int, optional
        Resolution the ground truth is resized to; defaults to the model's
        decoder output size.

    Returns
    -------
    MetricsReport
    """
    if predictor is None:
        model.eval()
        predictor = model_predictor(model)
    if mask_size is None:
        mask_size = model.config.mask_size if model is not None else None

    def score(sample: SegmentationSample) -> Tuple[str, float, float]:
        pred = np.asarray(predictor(sample)).astype(bool)
        gt = sample.gt_mask if mask_size is None else resize_mask(sample.gt_mask, mask_size)
        gt = np.asarray(gt).astype(bool)
        dsc = dsc_metric(pred, gt)
        nsd = nsd_metric(pred, gt, tolerance)
        logger.debug(f"{sample.id}: dsc {dsc:.4f} nsd {nsd:.4f}")
        return sample.id, dsc, nsd

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, samples))
    else:
        rows = [score(s) for s in samples]

    report = MetricsReport()
    for sample_id, dsc, nsd in rows:
        report.add(sample_id, dsc, nsd)
    logger.info(f"Evaluated {len(rows)} samples: mean DSC {report.mean_dsc:.4f}, mean NSD {report.mean_nsd:.4f}")

    if report_path is not None:
        report.write_csv(report_path)
        report.write_groups_csv(groups_report_path(report_path))
    return report


def evaluate_checkpoint(
    checkpoint: Union[str, Path],
    samples: Sequence[SegmentationSample],
    tolerance: float = 1.0,
    report_path: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
    tracker: Optional[RunTracker] = None,
) -> MetricsReport:
    """Load ``checkpoint`` (with its config sidecar) and run :func:`evaluate`."""
    model = checkpoint_load(checkpoint)
    report = evaluate(model, samples, tolerance, workers or model.config.workers, report_path)
    tracker = tracker if tracker is not None else RunTracker()
    tracker.log_metrics({"dsc": report.mean_dsc, "nsd": report.mean_nsd})
    if report_path is not None:
        tracker.log_artifact(report_path)
        tracker.log_artifact(groups_report_path(report_path))
    return report
