"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable; also the
reference the extension is benchmarked against.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    b, c, h, w = x.shape
    oh, ow = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, b, oh, ow))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * oh * ow), oh, ow


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b = x.shape[0]
    c_out, _, k, _ = w.shape
    cols, oh, ow = _im2col(x, k, stride, padding)
    out = w.reshape(c_out, -1) @ cols
    return np.ascontiguousarray(out.reshape(c_out, b, oh, ow).transpose(1, 0, 2, 3))


def conv2d_backward_input(grad_out: np.ndarray, w: np.ndarray, x_shape,
                          stride: int, padding: int) -> np.ndarray:
    b, c_in, h, wd = x_shape
    c_out, _, k, _ = w.shape
    _, _, oh, ow = grad_out.shape
    go = grad_out.transpose(1, 0, 2, 3).reshape(c_out, -1)
    grad_cols = (w.reshape(c_out, -1).T @ go).reshape(c_in, k, k, b, oh, ow)
    gxp = np.zeros((b, c_in, h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                grad_cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        return gxp[:, :, padding:padding + h, padding:padding + wd].copy()
    return gxp


def conv2d_backward_kernel(grad_out: np.ndarray, x: np.ndarray, k: int,
                           stride: int, padding: int) -> np.ndarray:
    b, c_out = grad_out.shape[:2]
    c_in = x.shape[1]
    cols, oh, ow = _im2col(x, k, stride, padding)
    go = grad_out.transpose(1, 0, 2, 3).reshape(c_out, -1)
    return (go @ cols.T).reshape(c_out, c_in, k, k)
