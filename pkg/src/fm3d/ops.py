"""Forward and backward kernels on NCHW numpy arrays.

Convolution is cross-correlation (no kernel flip).  Filters use the filter
map layout ``(K, s1, s2, c)``: kernel height, kernel width, then input
channel.
"""
import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch


def conv_output_size(h, w, s1, s2, stride, padding):
    return (h + 2 * padding - s1) // stride + 1, (w + 2 * padding - s2) // stride + 1


def _check_conv(x, filters, stride, padding):
    if x.ndim != 4:
        raise ShapeMismatch(f"input must be NCHW, got shape {x.shape}")
    if filters.ndim != 4:
        raise ShapeMismatch(f"filters must be (K, s1, s2, c), got shape {filters.shape}")
    if filters.shape[3] != x.shape[1]:
        raise ShapeMismatch(
            f"filters have {filters.shape[3]} channels, input has {x.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"bad stride {stride} / padding {padding}")
    ho, wo = conv_output_size(x.shape[2], x.shape[3], filters.shape[1], filters.shape[2],
                              stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"output spatial size ({ho}, {wo}) is empty")
    return ho, wo


def _im2col(x, s1, s2, stride, padding, ho, wo):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (s1, s2), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, ho, wo, s1, s2) -> rows (N, ho, wo), columns (s1, s2, C)
    cols = win.transpose(0, 2, 3, 4, 5, 1)
    return np.ascontiguousarray(cols).reshape(x.shape[0] * ho * wo, s1 * s2 * x.shape[1])


def conv2d_forward(x, filters, stride=1, padding=0):
    """Output shape ``(N, K, ho, wo)`` with ``ho = (H + 2p - s1) // stride + 1``."""
    ho, wo = _check_conv(x, filters, stride, padding)
    k, s1, s2, _ = filters.shape
    cols = _im2col(x, s1, s2, stride, padding, ho, wo)
    out = cols @ filters.reshape(k, -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, k).transpose(0, 3, 1, 2))


def conv2d_backward(x, filters, out_grad, stride=1, padding=0):
    """Return ``(input_grad, filter_grads)`` for :func:`conv2d_forward`."""
    ho, wo = _check_conv(x, filters, stride, padding)
    n, c, h, w = x.shape
    k, s1, s2, _ = filters.shape
    if out_grad.shape != (n, k, ho, wo):
        raise ShapeMismatch(f"out_grad has shape {out_grad.shape}, expected {(n, k, ho, wo)}")
    cols = _im2col(x, s1, s2, stride, padding, ho, wo)
    g = out_grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    filter_grads = (g.T @ cols).reshape(filters.shape)

    dcols = (g @ filters.reshape(k, -1)).reshape(n, ho, wo, s1, s2, c)
    dpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(s1):
        for j in range(s2):
            dpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2))
    input_grad = dpad[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(input_grad), filter_grads


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, out_grad):
    return out_grad * (x > 0)


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped.

    Returns ``(out, mask)`` where ``mask`` marks the first maximum of each
    window (ties go to the earliest position in row-major order).
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"maxpool2 needs at least 2x2 input, got {h}x{w}")
    win = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(x_shape, arg, out_grad):
    n, c, h, w = x_shape
    ho, wo = arg.shape[2], arg.shape[3]
    win = np.zeros((n, c, ho, wo, 4), dtype=out_grad.dtype)
    np.put_along_axis(win, arg[..., None], out_grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    grad = np.zeros(x_shape, dtype=out_grad.dtype)
    grad[:, :, : 2 * ho, : 2 * wo] = win
    return grad


def avgpool_global_forward(x):
    return x.mean(axis=(2, 3))


def avgpool_global_backward(x_shape, out_grad):
    n, c, h, w = x_shape
    return np.broadcast_to(out_grad[:, :, None, None] / (h * w), x_shape).copy()


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"dense input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias


def dense_backward(x, weight, out_grad):
    """Return ``(input_grad, weight_grad, bias_grad)``."""
    return out_grad @ weight.T, x.T @ out_grad, out_grad.sum(axis=0)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch size {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    return loss, grad / n
