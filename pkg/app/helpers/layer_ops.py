"""Layer primitives for the trial-image CNN.

Every function is pure and works on numpy arrays. Image tensors are laid out
``[C, H, W]`` or, with a leading batch axis, ``[N, C, H, W]``; dense tensors are
``[n]`` or ``[N, n]``. Backward functions take what the matching forward
produced and never mutate their inputs.
"""
import math
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from app.models.errors import ShapeError, UsageError

Tensor = np.ndarray
Extent = Tuple[int, int]


def _as_image_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")


def conv_output_extent(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


def conv_windows(x: Tensor, kernel: Extent, stride: Extent = (1, 1)) -> Tensor:
    """Strided view of every receptive field: ``[N, C, H', W', kh, kw]``."""
    windows = sliding_window_view(x, kernel, axis=(2, 3))
    return windows[:, :, ::stride[0], ::stride[1]]


# ---------- Convolution ----------

def conv2d_forward(x: Tensor, weights: Tensor, bias: Tensor, stride: Extent = (1, 1)) -> Tensor:
    """Valid cross-correlation of ``x`` with ``weights`` ``[F, C, kh, kw]`` plus ``bias``."""
    xb, squeezed = _as_image_batch(x)
    filters, channels, kh, kw = weights.shape
    _, in_channels, height, width = xb.shape
    if in_channels != channels:
        raise ShapeError(f"conv2d expects {channels} input maps, got {in_channels}")
    if height < kh or width < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds input {height}x{width}")
    if stride[0] < 1 or stride[1] < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")

    windows = conv_windows(xb, (kh, kw), stride)
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', F]
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return out[0] if squeezed else out


def conv2d_input_grad(grad_out: Tensor, weights: Tensor, input_shape: Tuple[int, ...],
                      stride: Extent = (1, 1)) -> Tensor:
    """Transpose convolution: pushes ``grad_out`` back through ``weights``.

    Any kernel-shaped tensor can stand in for the weights, which is how the
    pattern-based and LRP backward passes reuse it.
    """
    gb, squeezed = _as_image_batch(grad_out)
    batch, _, out_h, out_w = gb.shape
    _, channels, kh, kw = weights.shape
    height, width = input_shape[-2:]
    sr, sc = stride

    grad_in = np.zeros((batch, channels, height, width))
    for i in range(kh):
        row_stop = i + sr * (out_h - 1) + 1
        for j in range(kw):
            col_stop = j + sc * (out_w - 1) + 1
            contrib = np.tensordot(gb, weights[:, :, i, j], axes=([1], [0]))  # [N, H', W', C]
            grad_in[:, :, i:row_stop:sr, j:col_stop:sc] += contrib.transpose(0, 3, 1, 2)
    return grad_in[0] if squeezed else grad_in


def conv2d_backward(cache, grad_out: Tensor, weights: Tensor,
                    stride: Extent = (1, 1)) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of a conv layer with respect to its input, weights and bias."""
    if cache is None or cache.input is None:
        raise UsageError("conv2d_backward needs the cache of a forward pass")

    xb, squeezed = _as_image_batch(cache.input)
    gb = grad_out[None] if squeezed else grad_out
    _, _, kh, kw = weights.shape

    windows = conv_windows(xb, (kh, kw), stride)
    grad_weights = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = gb.sum(axis=(0, 2, 3))
    grad_input = conv2d_input_grad(gb, weights, xb.shape, stride)
    return (grad_input[0] if squeezed else grad_input), grad_weights, grad_bias


# ---------- Max-pool ----------

def maxpool2d_forward(x: Tensor, window: Extent) -> Tuple[Tensor, Tensor]:
    """Non-overlapping max-pool (stride == window) over the last two axes.

    Returns the pooled tensor and the argmax map, which holds the absolute
    ``(row, col)`` input coordinate of every output cell (shape ``[..., H', W', 2]``).
    Ties go to the first cell of the window in row-major order.
    """
    pr, pc = window
    height, width = x.shape[-2:]
    if pr < 1 or pc < 1 or pr > height or pc > width:
        raise ShapeError(f"maxpool window {pr}x{pc} does not fit input {height}x{width}")

    lead = x.shape[:-2]
    out_h, out_w = height // pr, width // pc
    maps = x.reshape((-1, height, width))[:, :out_h * pr, :out_w * pc]
    blocks = maps.reshape(-1, out_h, pr, out_w, pc).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(-1, out_h, out_w, pr * pc)

    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = np.arange(out_h)[:, None] * pr + local // pc
    cols = np.arange(out_w)[None, :] * pc + local % pc
    argmax = np.stack([rows, cols], axis=-1)

    return out.reshape(lead + (out_h, out_w)), argmax.reshape(lead + (out_h, out_w, 2))


def maxpool2d_backward(grad_out: Tensor, pool_argmax: Tensor, input_shape: Tuple[int, ...]) -> Tensor:
    """Routes every output value to the input cell recorded in ``pool_argmax``."""
    height, width = input_shape[-2:]
    out_h, out_w = grad_out.shape[-2:]
    grads = grad_out.reshape(-1, out_h, out_w)
    coords = pool_argmax.reshape(-1, out_h, out_w, 2)

    grad_in = np.zeros((grads.shape[0], height, width))
    maps = np.arange(grads.shape[0])[:, None, None]
    grad_in[maps, coords[..., 0], coords[..., 1]] = grads
    return grad_in.reshape(input_shape)


# ---------- Dense ----------

def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense layer expects {weights.shape[1]} inputs, got {x.shape[-1]}")
    return x @ weights.T + bias


def dense_backward(cache, grad_out: Tensor, weights: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    if cache is None or cache.input is None:
        raise UsageError("dense_backward needs the cache of a forward pass")
    x = cache.input
    if x.ndim == 1:
        return grad_out @ weights, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


# ---------- Element-wise ----------

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, pre_activation: Tensor) -> Tensor:
    return grad_out * (pre_activation > 0)


def sigmoid_forward(x: Tensor) -> Tensor:
    return expit(x)


def sigmoid_backward(grad_out: Tensor, output: Tensor) -> Tensor:
    return grad_out * output * (1.0 - output)


def dropout_forward(x: Tensor, p: float, rng: Optional[np.random.Generator],
                    train: bool) -> Tuple[Tensor, Optional[Tensor]]:
    """Inverted dropout: kept units are scaled by 1/(1-p) so inference is the identity."""
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise UsageError("dropout at train time needs a random source")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(grad_out: Tensor, keep: Optional[Tensor]) -> Tensor:
    return grad_out if keep is None else grad_out * keep


def amplitude_norm_forward(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Divides every feature map by its max absolute activation (all-zero maps pass)."""
    peak = np.abs(x).max(axis=(-2, -1), keepdims=True)
    scale = np.where(peak > 0, peak, 1.0)
    return x / scale, scale


def amplitude_norm_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    lead = x.shape[:-2]
    flat = x.reshape(lead + (-1,))
    grads = grad_out.reshape(lead + (-1,))

    peak_at = np.argmax(np.abs(flat), axis=-1)[..., None]
    peak_value = np.take_along_axis(flat, peak_at, axis=-1)[..., 0]
    peak = np.abs(peak_value)
    scale = np.where(peak > 0, peak, 1.0)

    grad_in = grads / scale[..., None]
    correction = np.where(peak > 0, np.sign(peak_value) * np.sum(grads * flat, axis=-1) / scale ** 2, 0.0)
    at_peak = np.take_along_axis(grad_in, peak_at, axis=-1)
    np.put_along_axis(grad_in, peak_at, at_peak - correction[..., None], axis=-1)
    return grad_in.reshape(x.shape)


# ---------- Output head ----------

def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tuple[float, Tensor, Tensor]:
    """Cross-entropy of softmax(logits) against ``label``.

    With a batch (``[N, K]`` logits and ``N`` labels) the loss is the batch mean
    and the gradient is scaled by 1/N.
    """
    z = np.asarray(logits, dtype=float)
    batched = z.ndim == 2
    classes = z.shape[-1]
    if classes < 2:
        raise UsageError(f"softmax needs at least 2 classes, got {classes}")

    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if np.any(labels < 0) or np.any(labels >= classes):
        raise UsageError(f"label {label} out of range for {classes} classes")

    zb = z if batched else z[None]
    shifted = zb - zb.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_probs)

    rows = np.arange(zb.shape[0])
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= zb.shape[0]

    if batched:
        return loss, probs, grad
    return loss, probs[0], grad[0]


# ---------- Initialisation ----------

def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def glorot_init(shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Glorot/Xavier uniform on ±sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = _fans(tuple(shape))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def bias_init(size: int, rng: np.random.Generator, sigma: float = 0.1) -> Tensor:
    # uniform with mean 0 and standard deviation sigma
    half_width = sigma * math.sqrt(3.0)
    return rng.uniform(-half_width, half_width, size=size)
