"""
Synthetic promptable-segmentation data: one anti-aliased shape (ellipse,
rotated rectangle or ring) per image on a noisy background.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Union

import numpy as np

from dual_branch_sam.data.dataset import SegmentationSample, mask_box, write_dataset

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "rectangle", "ring")
SUPERSAMPLE = 4


def _rotated_frame(xs, ys, cx, cy, angle):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xs - cx, ys - cy
    return c * dx + s * dy, -s * dx + c * dy


def _ellipse(xs, ys, p):
    u, v = _rotated_frame(xs, ys, p["cx"], p["cy"], p["angle"])
    return (u / p["a"]) ** 2 + (v / p["b"]) ** 2 <= 1.0


def _rectangle(xs, ys, p):
    u, v = _rotated_frame(xs, ys, p["cx"], p["cy"], p["angle"])
    return (np.abs(u) <= p["a"]) & (np.abs(v) <= p["b"])


def _ring(xs, ys, p):
    r2 = (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2
    return (r2 <= p["a"] ** 2) & (r2 >= (p["a"] * p["inner"]) ** 2)


_INSIDE: Dict[str, Callable] = {"ellipse": _ellipse, "rectangle": _rectangle, "ring": _ring}


def render_coverage(shape: str, params: dict, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, from a ``4 x 4`` subpixel grid."""
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    fine = (np.arange(size)[:, None] + offsets[None, :]).reshape(-1)
    ys, xs = np.meshgrid(fine, fine, indexing="ij")
    inside = _INSIDE[shape](xs, ys, params).astype(np.float64)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _draw_params(shape: str, size: int, rng: np.random.Generator) -> dict:
    a = rng.uniform(0.15, 0.3) * size
    b = rng.uniform(0.5, 1.0) * a
    margin = a + 1.0
    return {
        "cx": rng.uniform(margin, size - margin),
        "cy": rng.uniform(margin, size - margin),
        "a": a,
        "b": b,
        "angle": rng.uniform(0.0, np.pi),
        "inner": rng.uniform(0.35, 0.6),
    }


def generate_sample(index: int, size: int, rng: np.random.Generator) -> SegmentationSample:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    coverage = render_coverage(shape, _draw_params(shape, size, rng), size)
    gt = (coverage >= 0.5).astype(np.float32)

    background = rng.uniform(0.1, 0.4)
    foreground = rng.uniform(0.6, 0.9)
    tint = rng.uniform(0.9, 1.1, size=(3, 1, 1))
    noise = rng.normal(0.0, 0.05, size=(3, size, size))
    intensity = background + (foreground - background) * coverage
    image = np.clip(intensity[None] * tint + noise, 0.0, 1.0).astype(np.float32)

    return SegmentationSample(image, gt, mask_box(gt), f"{shape}_{index:04d}")


def synth_dataset_generate(n: int, size: int, seed: int, out: Union[str, Path]) -> List[SegmentationSample]:
    """
    Render ``n`` samples of ``size x size`` pixels from ``seed`` and write them
    (DBSM tensors plus manifest) to ``out``. Sample ids are ``<shape>_<index>``.

    Returns
    -------
    list of SegmentationSample
    """
    rng = np.random.default_rng(seed)
    samples = [generate_sample(i, size, rng).validate() for i in range(n)]
    write_dataset(out, samples)
    logger.info(f"Generated {n} synthetic {size}x{size} samples (seed {seed}) in {out}")
    return samples
