"""
Central finite-difference gradient checker.
"""

import logging
from typing import Callable, Optional

import numpy as np

from dual_branch_sam.exceptions import ContractError
from dual_branch_sam.tensor.tensor import Tape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """Gradient of scalar ``f`` with respect to ``x`` from one backward pass."""
    previous = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    try:
        with Tape():
            y = f(x)
            backward(y)
    finally:
        x.requires_grad = previous
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.zero_grad()
    return grad


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    grad: Optional[np.ndarray] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare an analytic gradient against central differences.

    Each checked coordinate ``i`` contributes
    ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`` where
    ``n_i = (f(x + h e_i) - f(x - h e_i)) / (2 h)``.

    Parameters
    ----------
    f : callable
        Scalar-valued function of ``x``. It may close over other tensors;
        ``x`` is perturbed in place and restored afterwards.
    x : Tensor
        Point of evaluation.
    h : float, optional
        Step size.
    grad : np.ndarray, optional
        Analytic gradient to test. Computed by ``backward`` when omitted.
    max_coords : int, optional
        Check at most this many coordinates, drawn without replacement by
        ``rng``; all coordinates when omitted.
    rng : np.random.Generator, optional
        Source for coordinate selection.

    Returns
    -------
    float
        Maximum relative error over the checked coordinates.
    """
    if grad is None:
        grad = analytic_gradient(f, x)
    if grad.shape != x.shape:
        raise ContractError(f"analytic gradient shape {grad.shape} differs from input shape {x.shape}")

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    analytic = grad.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            f_plus = f(x).item()
            flat[i] = original - h
            f_minus = f(x).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
