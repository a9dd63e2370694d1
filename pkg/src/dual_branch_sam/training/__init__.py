from dual_branch_sam.training.optim import AdamW, AdamWState, adamw_step, poly_lr
from dual_branch_sam.training.trainer import (
    LossRecord,
    TrainResult,
    read_loss_log,
    spawn_generators,
    total_steps_for,
    train,
)
from dual_branch_sam.training.evaluate import evaluate, evaluate_checkpoint, model_predictor
from dual_branch_sam.training.ablation import AblationRow, ablate, load_presets
