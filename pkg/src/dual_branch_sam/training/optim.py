"""
AdamW with decoupled weight decay and the polynomial learning-rate schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from dual_branch_sam.exceptions import ContractError
from dual_branch_sam.model.module import Parameter

logger = logging.getLogger(__name__)


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    """
    ``lr0 * (1 - step / total_steps) ** power``, with ``step`` clamped to
    ``[0, total_steps]``.
    """
    if total_steps <= 0:
        raise ContractError(f"poly_lr needs a positive step budget, got {total_steps}")
    progress = min(max(step, 0), total_steps) / total_steps
    return lr0 * (1.0 - progress) ** power


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tuple[str, Parameter]],
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
):
    """
    One in-place AdamW update of every trainable parameter in ``params``.

    Moments are bias-corrected; weight decay is decoupled
    (``p <- p - lr * wd * p`` before the Adam step). Frozen parameters are
    skipped and never read.

    Raises
    ------
    ContractError
        If a trainable parameter has no gradient.
    """
    trainable = [(name, p) for name, p in params if not p.frozen]
    missing = [name for name, p in trainable if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters: {', '.join(missing)}")

    state.step += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in trainable:
        grad = p.grad
        m = state.exp_avg.setdefault(name, np.zeros_like(p.data))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


class AdamW:
    """Binds a parameter list and hyperparameters to :func:`adamw_step`."""

    def __init__(self, params: Sequence[Tuple[str, Parameter]], betas=(0.9, 0.999), weight_decay: float = 0.01,
                 eps: float = 1e-8):
        self.params = list(params)
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamWState()

    def step(self, lr: float):
        adamw_step(self.params, self.state, lr, self.betas, self.weight_decay, self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()
