"""Convolution kernel backends.

Two interchangeable implementations of the 2-D convolution forward/backward
kernels, both im2col + GEMM: a compiled Cython extension (C-level column
packing feeding BLAS dgemm directly) and a pure-numpy fallback (strided
slicing feeding ``@``).  They produce bit-identical results; the compiled
backend avoids the Python-level packing copies and is preferred when the
extension was built.  ``set_backend`` lets tests and benchmarks pin either.
"""

from __future__ import annotations

import os

import numpy as np

from eegmatch._kernels import conv_numpy
from eegmatch.errors import ValidationError

try:
    from eegmatch._kernels import _conv_ext
except ImportError:  # extension not built; numpy fallback only
    _conv_ext = None

_BACKENDS = {"numpy": conv_numpy}
if _conv_ext is not None:
    _BACKENDS["cython"] = _conv_ext

_active = _BACKENDS.get("cython", conv_numpy)

_FORCED = os.environ.get("EEGMATCH_KERNEL_BACKEND")
if _FORCED:
    if _FORCED not in _BACKENDS:
        raise ValidationError(
            f"EEGMATCH_KERNEL_BACKEND={_FORCED!r} is not available; "
            f"choose one of {', '.join(sorted(_BACKENDS))}")
    _active = _BACKENDS[_FORCED]


def available_backends() -> tuple:
    return tuple(sorted(_BACKENDS))


def active_backend() -> str:
    return _active.NAME


def set_backend(name: str) -> str:
    """Select a kernel backend by name; returns the previously active one."""
    global _active
    if name not in _BACKENDS:
        raise ValidationError(
            f"unknown kernel backend {name!r}; available: {available_backends()}")
    previous = _active.NAME
    _active = _BACKENDS[name]
    return previous


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _as_f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """x: (B, C_in, H, W); w: (C_out, C_in, k, k) -> (B, C_out, OH, OW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValidationError("conv2d expects 4-d input and kernel")
    if w.shape[2] != w.shape[3]:
        raise ValidationError("conv2d kernel must be square")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValidationError("conv2d input smaller than kernel after padding")
    return _active.conv2d_forward(_as_f64(x), _as_f64(w), stride, padding)


def conv2d_backward_input(grad_out: np.ndarray, w: np.ndarray, x_shape,
                          stride: int = 1, padding: int = 0) -> np.ndarray:
    return _active.conv2d_backward_input(
        _as_f64(grad_out), _as_f64(w), tuple(x_shape), stride, padding)


def conv2d_backward_kernel(grad_out: np.ndarray, x: np.ndarray, k: int,
                           stride: int = 1, padding: int = 0) -> np.ndarray:
    return _active.conv2d_backward_kernel(
        _as_f64(grad_out), _as_f64(x), k, stride, padding)
