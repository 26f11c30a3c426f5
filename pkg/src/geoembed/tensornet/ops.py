"""Batched numerical cores for the layer algebra.

Spatial tensors are (batch, height, width, channels) float64 arrays.
Convolution uses the kernel-flipped convention: conv(x, K) slides the
spatially flipped kernel, so it equals the textbook discrete convolution
rather than cross-correlation. Transpose convolution is the exact linear
adjoint of the matching convolution.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Input shape does not compose with the layer's parameters."""


def conv_output_size(i: int, k: int, stride: int, pad: int) -> int:
    o = (i + 2 * pad - k) // stride + 1
    if o < 1:
        raise ShapeMismatch(
            f"convolution output collapses: input {i}, kernel {k}, "
            f"stride {stride}, pad {pad}"
        )
    return o


def _windows(x_pad: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = x_pad.shape
    sn, sh, sw, sc = x_pad.strides
    shape = (n, oh, ow, k, k, c)
    strides = (sn, stride * sh, stride * sw, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(x_pad, shape, strides)


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    out[:, pad : pad + h, pad : pad + w, :] = x
    return out


def conv2d_batch(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-channel 2-D convolution; returns (output, im2col columns).

    kernel has shape (k, k, c_in, c_out); each output channel is
    bias + the sum over input channels of the flipped-kernel convolution.
    """
    n, h, w, ci = x.shape
    k, k2, kci, co = kernel.shape
    if k != k2 or kci != ci:
        raise ShapeMismatch(f"kernel {kernel.shape} does not fit input {x.shape}")
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    x_pad = _pad_spatial(x, pad)
    cols = _windows(x_pad, k, stride, oh, ow).reshape(n * oh * ow, k * k * ci)
    w_flat = kernel[::-1, ::-1].reshape(k * k * ci, co)
    out = cols @ w_flat
    if bias is not None:
        out += bias
    return out.reshape(n, oh, ow, co), cols


def conv2d_backward(
    dy: np.ndarray,
    cols: np.ndarray,
    kernel: np.ndarray,
    x_shape: tuple,
    stride: int,
    pad: int,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (dx, dkernel, dbias) of conv2d_batch.

    dx is the costly part; pass need_input_grad=False for the first layer
    of a network, where it would be discarded.
    """
    n, h, w, ci = x_shape
    k = kernel.shape[0]
    _, oh, ow, co = dy.shape
    dy_mat = dy.reshape(n * oh * ow, co)
    dw_flat = cols.T @ dy_mat
    dkernel = dw_flat.reshape(k, k, ci, co)[::-1, ::-1]
    dbias = dy_mat.sum(axis=0)
    dx = None
    if need_input_grad:
        dx = scatter_adjoint(dy, kernel[::-1, ::-1], (n, h, w, ci), stride, pad)
    return dx, dkernel, dbias


def scatter_adjoint(
    z: np.ndarray, w_slide: np.ndarray, out_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of the sliding-window product: scatter z back through w_slide.

    w_slide is the kernel in sliding orientation (k, k, c_out_target, c_in_z),
    already flipped if it came from a convolution kernel. One matrix product
    computes every offset's contribution; the k*k loop only does strided adds.
    """
    n, h, w, _ = out_shape
    k, _, ct, cz = w_slide.shape
    _, ih, iw, _ = z.shape
    # (n*ih*iw, cz) @ (cz, k*k*ct) -> per-offset contributions
    w_mat = w_slide.transpose(3, 0, 1, 2).reshape(cz, k * k * ct)
    contrib = (z.reshape(-1, cz) @ w_mat).reshape(n, ih, iw, k, k, ct)
    acc = np.zeros((n, h + 2 * pad, w + 2 * pad, ct))
    for m in range(k):
        for nn in range(k):
            acc[:, m : m + ih * stride : stride, nn : nn + iw * stride : stride, :] += (
                contrib[:, :, :, m, nn, :]
            )
    if pad:
        acc = acc[:, pad : pad + h, pad : pad + w, :]
    return acc


def transpose_conv2d_batch(
    z: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    pad: int,
    output_size: int | None = None,
) -> np.ndarray:
    """Adjoint of conv2d_batch with the same kernel (k, k, c_out, c_in).

    Maps (n, ih, iw, c_in) to (n, o, o, c_out) with the default
    o = (ih - 1) * stride - 2 * pad + k. When the matching convolution's
    floor discarded trailing rows (stride > 1), pass its input size as
    output_size to recover the exact adjoint shape.
    """
    n, ih, iw, ci = z.shape
    k, k2, co, kci = kernel.shape
    if k != k2 or kci != ci:
        raise ShapeMismatch(f"kernel {kernel.shape} does not fit input {z.shape}")
    oh = output_size or (ih - 1) * stride - 2 * pad + k
    ow = output_size or (iw - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1:
        raise ShapeMismatch("transpose convolution output collapses")
    if conv_output_size(oh, k, stride, pad) != ih:
        raise ShapeMismatch(
            f"output size {oh} is not consistent with input {ih} "
            f"(kernel {k}, stride {stride}, pad {pad})"
        )
    out = scatter_adjoint(z, kernel[::-1, ::-1], (n, oh, ow, co), stride, pad)
    if bias is not None:
        out += bias
    return out


def transpose_conv2d_backward(
    dout: np.ndarray, z_shape: tuple, kernel: np.ndarray, z: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dz, dkernel, dbias) of transpose_conv2d_batch."""
    n, ih, iw, ci = z_shape
    k = kernel.shape[0]
    co = kernel.shape[2]
    dout_pad = _pad_spatial(dout, pad)
    win = _windows(dout_pad, k, stride, ih, iw)  # (n, ih, iw, k, k, co)
    w_flip = kernel[::-1, ::-1]  # sliding orientation (k, k, co, ci)
    dz = np.einsum("npqmkc,mkcd->npqd", win, w_flip, optimize=True)
    # dkernel via the scattered products, then unflip
    dw_flip = np.einsum("npqmkc,npqd->mkcd", win, z, optimize=True)
    dkernel = dw_flip[::-1, ::-1]
    dbias = dout.sum(axis=(0, 1, 2))
    return dz, dkernel, dbias


def max_pool_batch(
    x: np.ndarray, k: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window maxima and flat window-relative argmax indices.

    Ties resolve to the first cell in row-major window order. Output size is
    floor((i - k) / stride) + 1 per axis; no padding.
    """
    n, h, w, c = x.shape
    if h < k or w < k:
        raise ShapeMismatch(f"pooling window {k} exceeds input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = _windows(x, k, stride, oh, ow).reshape(n, oh, ow, k * k, c)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def max_pool_backward(
    dy: np.ndarray, idx: np.ndarray, x_shape: tuple, k: int, stride: int
) -> np.ndarray:
    n, h, w, c = x_shape
    _, oh, ow, _ = dy.shape
    dx = np.zeros(x_shape)
    for flat in range(k * k):
        m, nn = divmod(flat, k)
        dx[:, m : m + oh * stride : stride, nn : nn + ow * stride : stride, :] += (
            np.where(idx == flat, dy, 0.0)
        )
    return dx


def max_unpool_batch(
    y: np.ndarray, idx: np.ndarray, x_shape: tuple, k: int, stride: int
) -> np.ndarray:
    """Scatter pooled values back to their saved positions, zeros elsewhere."""
    if y.shape != idx.shape:
        raise ShapeMismatch(f"values {y.shape} do not match indices {idx.shape}")
    n, oh, ow, c = y.shape
    out = np.zeros(x_shape)
    for flat in range(k * k):
        m, nn = divmod(flat, k)
        out[:, m : m + oh * stride : stride, nn : nn + ow * stride : stride, :] += (
            np.where(idx == flat, y, 0.0)
        )
    return out


def max_unpool_backward(
    dout: np.ndarray, idx: np.ndarray, k: int, stride: int
) -> np.ndarray:
    n, oh, ow, c = idx.shape
    dy = np.zeros(idx.shape)
    for flat in range(k * k):
        m, nn = divmod(flat, k)
        dy += np.where(
            idx == flat,
            dout[:, m : m + oh * stride : stride, nn : nn + ow * stride : stride, :],
            0.0,
        )
    return dy


# Single-sample conveniences matching the (h, w, c) contract.


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    out, _ = conv2d_batch(np.asarray(x, dtype=np.float64)[None], kernel, bias, stride, pad)
    return out[0]


def transpose_conv2d(z, kernel, bias=None, stride=1, pad=0, output_size=None):
    return transpose_conv2d_batch(
        np.asarray(z, dtype=np.float64)[None], kernel, bias, stride, pad, output_size
    )[0]


def max_pool(x, k=2, stride=2):
    out, idx = max_pool_batch(np.asarray(x, dtype=np.float64)[None], k, stride)
    return out[0], idx[0]


def max_unpool(y, idx, x_shape, k=2, stride=2):
    return max_unpool_batch(
        np.asarray(y, dtype=np.float64)[None], np.asarray(idx)[None], (1, *x_shape), k, stride
    )[0]
