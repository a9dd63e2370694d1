"""
Differentiable kernels: activations, normalizations, convolutions and
bilinear sampling. Each kernel computes its forward with numpy and records a
closure that returns the input gradients.
"""

import logging
import math
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from dual_branch_sam.exceptions import ConfigurationError, DimensionError
from dual_branch_sam.tensor.tensor import Tensor, record

logger = logging.getLogger(__name__)

Padding = Union[int, Tuple[int, int, int, int]]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return record("relu", np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    e = np.exp(z[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return record("gelu", (x.data * cdf).astype(x.dtype), (x,), lambda g: (g * (cdf + x.data * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (x,), grad_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when not training or ``rate`` is 0."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """
    Stochastic depth on a residual branch: every sample of the batch keeps the
    whole branch with probability ``1 - rate``; kept samples are divided by the
    keep probability so the expectation is unchanged. Identity in eval mode.
    """
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)


# -- normalizations --------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Normalize over the last axis, then apply the per-channel affine map.

    Raises
    ------
    DimensionError
        If the last extent of ``x`` differs from ``gamma``/``beta``.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        g_hat = g * gamma.data
        grad_x = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out, (x, gamma, beta), grad_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Batch normalization over ``(B, H, W)`` per channel of a ``[B, C, H, W]`` input.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential ``momentum``). In eval mode
    the running buffers are used as they are; freshly initialized buffers
    (mean 0, var 1) are valid.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}")
    axes = (0, 2, 3)
    view = (1, -1, 1, 1)
    g_w = gamma.data.reshape(view)

    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def grad_fn(g):
            g_hat = g * g_w
            grad_x = inv_std * (
                g_hat
                - g_hat.mean(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=axes, keepdims=True)
            )
            return grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(view)
        x_hat = (x.data - running_mean.reshape(view)) * inv_std

        def grad_fn(g):
            return g * g_w * inv_std, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    out = (x_hat * g_w + beta.data.reshape(view)).astype(x.dtype)
    return record("batch_norm", out, (x, gamma, beta), grad_fn)


# -- convolutions ----------------------------------------------------------


def _normalize_padding(pad: Padding) -> Tuple[int, int, int, int]:
    if isinstance(pad, int):
        return pad, pad, pad, pad
    if len(pad) != 4:
        raise ConfigurationError(f"padding must be an int or (top, bottom, left, right), got {pad}")
    return tuple(int(p) for p in pad)


def conv_output_extent(extent: int, kernel: int, stride: int, before: int, after: int) -> int:
    """
    Output extent of a strided convolution; the window grid must tile the
    padded input exactly.

    Raises
    ------
    ConfigurationError
        If the kernel does not fit or the stride leaves a remainder.
    """
    span = extent + before + after - kernel
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} larger than padded extent {extent + before + after}")
    if span % stride != 0:
        raise ConfigurationError(
            f"convolution extent not exact: ({extent} + {before} + {after} - {kernel}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _unpad(x: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    h, w = x.shape[2], x.shape[3]
    return x[:, :, top : h - bottom, left : w - right]


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Read-only ``[B, C, kh, kw, H', W']`` window view of a padded input."""
    s_b, s_c, s_h, s_w = xp.strides
    b, c = xp.shape[:2]
    return as_strided(
        xp,
        shape=(b, c, kh, kw, h_out, w_out),
        strides=(s_b, s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add ``[B, C, kh, kw, H', W']`` windows back onto a padded image."""
    h_out, w_out = cols.shape[-2:]
    image = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            image[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[:, :, i, j]
    return image


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: Padding = 0) -> Tensor:
    """
    Cross-correlation of ``x [B, C, H, W]`` with ``w [O, C, kh, kw]``, zero padding.

    ``pad`` is either one int for all sides or ``(top, bottom, left, right)``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, c_w, kh, kw = w.shape
    if c != c_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    pads = _normalize_padding(pad)
    h_out = conv_output_extent(h, kh, stride, pads[0], pads[1])
    w_out = conv_output_extent(wd, kw, stride, pads[2], pads[3])

    xp = _pad(x.data, pads)
    cols = _patches(xp, kh, kw, stride, h_out, w_out).reshape(bsz, c * kh * kw, h_out * w_out)
    w_mat = w.data.reshape(o, c * kh * kw)
    out = (w_mat @ cols).reshape(bsz, o, h_out, w_out)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def grad_fn(g):
        g_flat = g.reshape(bsz, o, h_out * w_out)
        grad_w = np.einsum("bon,bkn->ok", g_flat, cols).reshape(w.shape)
        grad_cols = (w_mat.T @ g_flat).reshape(bsz, c, kh, kw, h_out, w_out)
        grad_x = _unpad(_col2im(grad_cols, xp.shape, kh, kw, stride), pads)
        grads = [grad_x, grad_w]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, inputs, grad_fn)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: Padding = 0) -> Tensor:
    """One ``kh x kw`` filter per channel, ``w [C, kh, kw]``; no channel mixing."""
    if x.ndim != 4 or w.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects [B,C,H,W] and [C,kh,kw], got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    if w.shape[0] != c:
        raise DimensionError(f"depthwise_conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    _, kh, kw = w.shape
    pads = _normalize_padding(pad)
    h_out = conv_output_extent(h, kh, stride, pads[0], pads[1])
    w_out = conv_output_extent(wd, kw, stride, pads[2], pads[3])

    xp = _pad(x.data, pads)
    patches = _patches(xp, kh, kw, stride, h_out, w_out)
    out = np.einsum("bcijhw,cij->bchw", patches, w.data)

    def grad_fn(g):
        grad_w = np.einsum("bcijhw,bchw->cij", patches, g)
        grad_patches = np.einsum("cij,bchw->bcijhw", w.data, g)
        return _unpad(_col2im(grad_patches, xp.shape, kh, kw, stride), pads), grad_w

    return record("depthwise_conv2d", out, (x, w), grad_fn)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """
    Transposed convolution of ``x [B, Ci, H, W]`` with ``w [Ci, Co, kh, kw]``
    (no padding); output extent ``(H - 1) * stride + kh``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    bsz, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    h_out = (h - 1) * stride + kh
    w_out = (wd - 1) * stride + kw

    w_mat = w.data.reshape(ci, co * kh * kw)
    x_flat = x.data.reshape(bsz, ci, h * wd)
    cols = (w_mat.T @ x_flat).reshape(bsz, co, kh, kw, h, wd)
    out = _col2im(cols, (bsz, co, h_out, w_out), kh, kw, stride)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)

    def grad_fn(g):
        g_cols = _patches(g, kh, kw, stride, h, wd).reshape(bsz, co * kh * kw, h * wd)
        grad_x = (w_mat @ g_cols).reshape(x.shape)
        grad_w = np.einsum("bin,bkn->ik", x_flat, g_cols).reshape(w.shape)
        grads = [grad_x, grad_w]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv_transpose2d", out, inputs, grad_fn)


# -- bilinear sampling -----------------------------------------------------


def _corner_terms(px: np.ndarray, py: np.ndarray, height: int, width: int, clamp: bool):
    """
    Integer corners, fractional weights and validity of the four bilinear taps
    for continuous pixel coordinates ``px`` (columns) and ``py`` (rows).
    """
    if clamp:
        px = np.clip(px, 0.0, width - 1)
        py = np.clip(py, 0.0, height - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    ax = px - x0
    ay = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1.0 - ay), (1, ay)):
        for dx, wx in ((0, 1.0 - ax), (1, ax)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            corners.append((np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1), valid, wy * wx))
    return corners, ax, ay


def sample_bilinear_array(image: np.ndarray, points: np.ndarray, clamp: bool = False) -> np.ndarray:
    """
    Plain-array bilinear sampling shared by the autodiff kernel and resizing.

    Parameters
    ----------
    image : np.ndarray
        ``[B, C, H, W]`` values.
    points : np.ndarray
        ``[B, P, 2]`` normalized ``(x, y)`` positions; ``p`` maps to the
        continuous pixel coordinate ``p * extent - 0.5``.
    clamp : bool
        Clamp coordinates into the image (border replicate) instead of reading
        zeros outside it.

    Returns
    -------
    np.ndarray
        ``[B, P, C]`` samples.
    """
    _, _, height, width = image.shape
    px = points[..., 0] * width - 0.5
    py = points[..., 1] * height - 0.5
    corners, _, _ = _corner_terms(px, py, height, width, clamp)
    channels_last = image.transpose(0, 2, 3, 1)
    batch = np.arange(image.shape[0])[:, None]
    out = np.zeros(points.shape[:2] + (image.shape[1],), dtype=image.dtype)
    for yy, xx, valid, weight in corners:
        out += (weight * valid)[..., None] * channels_last[batch, yy, xx]
    return out


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """
    Differentiable bilinear sampling of ``x [B, C, H, W]`` at ``points [B, P, 2]``
    (align-corners-false, zero padding outside the image); returns ``[B, P, C]``.
    Gradients flow to both the image and the point coordinates.
    """
    if x.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != x.shape[0]:
        raise DimensionError(f"bilinear_sample: image {x.shape} vs points {points.shape}")
    bsz, c, height, width = x.shape
    px = points.data[..., 0] * width - 0.5
    py = points.data[..., 1] * height - 0.5
    corners, ax, ay = _corner_terms(px, py, height, width, clamp=False)
    channels_last = x.data.transpose(0, 2, 3, 1)
    batch = np.arange(bsz)[:, None]

    taps = []
    out = np.zeros((bsz, points.shape[1], c), dtype=x.dtype)
    for yy, xx, valid, weight in corners:
        value = channels_last[batch, yy, xx] * valid[..., None]
        taps.append(value)
        out += weight[..., None] * value

    def grad_fn(g):
        grad_cl = np.zeros_like(channels_last)
        batch_index = np.broadcast_to(batch, px.shape)
        for yy_c, xx_c, valid_c, weight_c in corners:
            np.add.at(grad_cl, (batch_index, yy_c, xx_c), g * (weight_c * valid_c)[..., None])
        v00, v01, v10, v11 = taps
        d_ax = (1.0 - ay)[..., None] * (v01 - v00) + ay[..., None] * (v11 - v10)
        d_ay = (1.0 - ax)[..., None] * (v10 - v00) + ax[..., None] * (v11 - v01)
        grad_points = np.stack([(g * d_ax).sum(axis=-1) * width, (g * d_ay).sum(axis=-1) * height], axis=-1)
        return grad_cl.transpose(0, 3, 1, 2), grad_points

    return record("bilinear_sample", out, (x, points), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis, ``weight [in, out]``."""
    out = x @ weight
    return out if bias is None else out + bias

