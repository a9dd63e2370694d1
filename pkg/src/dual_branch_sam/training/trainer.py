"""
The training loop: box-perturbed batches at both encoder resolutions,
BCE + Dice loss, AdamW under a per-step polynomial learning rate.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from dual_branch_sam.config import ModelConfig
from dual_branch_sam.configs.template_config import checkpoint_name, loss_log_name
from dual_branch_sam.data.dataset import SegmentationSample
from dual_branch_sam.data.transforms import prepare_batch
from dual_branch_sam.exceptions import ContractError, NonFiniteLossError
from dual_branch_sam.losses import combined_loss
from dual_branch_sam.mlflow_utils import RunTracker
from dual_branch_sam.model.db_sam import DbSamModel, checkpoint_save
from dual_branch_sam.tensor import Tape, backward
from dual_branch_sam.training.optim import AdamW, poly_lr

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["step", "epoch", "lr", "loss"]


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: DbSamModel
    losses: List[LossRecord]
    checkpoint: Path
    loss_log: Path


def total_steps_for(config: ModelConfig, n_samples: int) -> int:
    """``epochs * ceil(n / batch_size)``."""
    return config.epochs * math.ceil(n_samples / config.batch_size)


def spawn_generators(seed: int):
    """Independent ``(init, data, dropout)`` generators derived from one seed."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def write_loss_log(path: Union[str, Path], records: Sequence[LossRecord]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_HEADER)
        for r in records:
            writer.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss)])


def read_loss_log(path: Union[str, Path]) -> List[LossRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            LossRecord(int(row["step"]), int(row["epoch"]), float(row["lr"]), float(row["loss"]))
            for row in csv.DictReader(f)
        ]


def train(
    config: ModelConfig,
    samples: Sequence[SegmentationSample],
    out_dir: Union[str, Path],
    pretrained: Optional[Union[str, Path]] = None,
    tracker: Optional[RunTracker] = None,
) -> TrainResult:
    """
    Train a fresh model on ``samples`` and write ``loss.csv`` plus the final
    checkpoint (``model.dbsm`` with its ``.cfg`` sidecar) to ``out_dir``.

    Parameters
    ----------
    config : ModelConfig
        Validated before anything is built.
    samples : sequence of SegmentationSample
        Training set; every epoch visits it in a fresh random order.
    out_dir : str or Path
        Output directory, created if needed.
    pretrained : str or Path, optional
        DBSM file of frozen ViT/prompt-encoder tensors. When omitted they are
        drawn from ``config.pretrained_seed``.
    tracker : RunTracker, optional
        Receives the config and per-step loss/lr.

    Returns
    -------
    TrainResult

    Raises
    ------
    ConfigurationError
        For an invalid config.
    ContractError
        For an empty dataset.
    NonFiniteLossError
        As soon as a step produces a NaN or infinite loss.
    """
    config.validate()
    if not samples:
        raise ContractError("cannot train on an empty dataset")
    tracker = tracker if tracker is not None else RunTracker()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    init_rng, data_rng, dropout_rng = spawn_generators(config.seed)
    model = DbSamModel(config, init_rng)
    if pretrained is not None:
        model.load_pretrained(pretrained)
    model.set_rng(dropout_rng).train()
    optimizer = AdamW(model.trainable_parameters(), config.betas, config.weight_decay, config.adam_eps)

    n = len(samples)
    total = total_steps_for(config, n)
    logger.info(f"Training on {n} samples: {config.epochs} epochs, batch size {config.batch_size}, {total} steps")
    tracker.log_config(config)

    records: List[LossRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = data_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = prepare_batch([samples[i] for i in order[start : start + config.batch_size]], config, data_rng)
            lr = poly_lr(step, total, config.lr0, config.poly_power)

            optimizer.zero_grad()
            with Tape():
                logits = model(batch.image_vit, batch.image_conv, batch.boxes)
                loss = combined_loss(logits, batch.targets)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, value)
                backward(loss)
            optimizer.step(lr)

            records.append(LossRecord(step, epoch, lr, value))
            tracker.log_step(step, value, lr)
            if step % config.log_every == 0 or step == total - 1:
                logger.info(f"step {step}/{total} epoch {epoch} lr {lr:.3e} loss {value:.6f}")
            step += 1

    loss_log = out_dir / loss_log_name
    write_loss_log(loss_log, records)
    checkpoint = out_dir / checkpoint_name
    checkpoint_save(model, checkpoint)
    tracker.log_artifact(loss_log)
    logger.info(f"Finished training: final loss {records[-1].loss:.6f}, checkpoint {checkpoint}")
    return TrainResult(model, records, checkpoint, loss_log)
