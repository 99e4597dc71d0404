# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels: C-level im2col packing + direct BLAS dgemm.

Matches the contract of conv_numpy (same im2col algorithm), but performs the
patch packing/unpacking in tight C loops and calls dgemm through
scipy.linalg.cython_blas, avoiding the Python-level slice/transpose copies
of the numpy fallback.  Selected at import time when built.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

NAME = "cython"


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k,
                            Py_ssize_t stride, Py_ssize_t padding) nogil:
    return (n + 2 * padding - k) // stride + 1


def out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


cdef void _gemm_nn(double* a, double* b, double* c,
                   int m, int n, int k) nogil:
    """Row-major C(m,n) = A(m,k) @ B(k,n)."""
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N'
    dgemm(&nt, &nt, &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)


cdef void _gemm_tn(double* a, double* b, double* c,
                   int m, int n, int k) nogil:
    """Row-major C(m,n) = A(k,m)^T @ B(k,n)."""
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    dgemm(&nt, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef void _gemm_nt(double* a, double* b, double* c,
                   int m, int n, int k) nogil:
    """Row-major C(m,n) = A(m,k) @ B(n,k)^T."""
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    dgemm(&tt, &nt, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef void _pack_cols(double[:, :, :, ::1] x, double[:, ::1] cols,
                     Py_ssize_t kk, Py_ssize_t stride, Py_ssize_t padding,
                     Py_ssize_t oh, Py_ssize_t ow) nogil:
    """cols[(ci*k+ky)*k+kx, (ib*oh+oy)*ow+ox] = x[ib, ci, iy, ix] (0 outside)."""
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, ky, kx, ib, oy, ox, iy, ix, row, col0
    for ci in range(c):
        for ky in range(kk):
            for kx in range(kk):
                row = (ci * kk + ky) * kk + kx
                for ib in range(b):
                    for oy in range(oh):
                        iy = oy * stride + ky - padding
                        if iy < 0 or iy >= h:
                            continue
                        col0 = (ib * oh + oy) * ow
                        for ox in range(ow):
                            ix = ox * stride + kx - padding
                            if 0 <= ix < w:
                                cols[row, col0 + ox] = x[ib, ci, iy, ix]


cdef void _unpack_cols_add(double[:, :, :, ::1] gx, double[:, ::1] cols,
                           Py_ssize_t kk, Py_ssize_t stride, Py_ssize_t padding,
                           Py_ssize_t oh, Py_ssize_t ow) nogil:
    """col2im scatter-add: inverse of _pack_cols."""
    cdef Py_ssize_t b = gx.shape[0], c = gx.shape[1], h = gx.shape[2], w = gx.shape[3]
    cdef Py_ssize_t ci, ky, kx, ib, oy, ox, iy, ix, row, col0
    for ci in range(c):
        for ky in range(kk):
            for kx in range(kk):
                row = (ci * kk + ky) * kk + kx
                for ib in range(b):
                    for oy in range(oh):
                        iy = oy * stride + ky - padding
                        if iy < 0 or iy >= h:
                            continue
                        col0 = (ib * oh + oy) * ow
                        for ox in range(ow):
                            ix = ox * stride + kx - padding
                            if 0 <= ix < w:
                                gx[ib, ci, iy, ix] += cols[row, col0 + ox]


cdef void _pack_grad_out(double[:, :, :, ::1] grad_out, double[:, ::1] go_mat) nogil:
    """go_mat[co, (ib*oh+oy)*ow+ox] = grad_out[ib, co, oy, ox]."""
    cdef Py_ssize_t b = grad_out.shape[0], co_n = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef Py_ssize_t ib, co, oy, ox, col0
    for co in range(co_n):
        for ib in range(b):
            for oy in range(oh):
                col0 = (ib * oh + oy) * ow
                for ox in range(ow):
                    go_mat[co, col0 + ox] = grad_out[ib, co, oy, ox]


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kk = w.shape[2]
    cdef Py_ssize_t oh = _out(h, kk, stride, padding), ow = _out(wd, kk, stride, padding)
    cdef Py_ssize_t q = c_in * kk * kk, p = b * oh * ow
    cols_arr = np.zeros((q, p))
    out_mat_arr = np.empty((c_out, p))
    out_arr = np.empty((b, c_out, oh, ow))
    cdef double[:, ::1] cols = cols_arr, out_mat = out_mat_arr
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] wv = w
    cdef Py_ssize_t ib, co, oy, ox, col0
    with nogil:
        _pack_cols(x, cols, kk, stride, padding, oh, ow)
        _gemm_nn(&wv[0, 0, 0, 0], &cols[0, 0], &out_mat[0, 0],
                 <int>c_out, <int>p, <int>q)
        for ib in range(b):
            for co in range(c_out):
                for oy in range(oh):
                    col0 = (ib * oh + oy) * ow
                    for ox in range(ow):
                        out[ib, co, oy, ox] = out_mat[co, col0 + ox]
    return out_arr


def conv2d_backward_input(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] w,
                          x_shape, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t b = x_shape[0], c_in = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kk = w.shape[2]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef Py_ssize_t q = c_in * kk * kk, p = b * oh * ow
    go_mat_arr = np.empty((c_out, p))
    grad_cols_arr = np.empty((q, p))
    gx_arr = np.zeros((b, c_in, h, wd))
    cdef double[:, ::1] go_mat = go_mat_arr, grad_cols = grad_cols_arr
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] wv = w
    with nogil:
        _pack_grad_out(grad_out, go_mat)
        _gemm_tn(&wv[0, 0, 0, 0], &go_mat[0, 0], &grad_cols[0, 0],
                 <int>q, <int>p, <int>c_out)
        _unpack_cols_add(gx, grad_cols, kk, stride, padding, oh, ow)
    return gx_arr


def conv2d_backward_kernel(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] x,
                           Py_ssize_t kk, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef Py_ssize_t q = c_in * kk * kk, p = b * oh * ow
    cols_arr = np.zeros((q, p))
    go_mat_arr = np.empty((c_out, p))
    gw_arr = np.empty((c_out, c_in, kk, kk))
    cdef double[:, ::1] cols = cols_arr, go_mat = go_mat_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    with nogil:
        _pack_cols(x, cols, kk, stride, padding, oh, ow)
        _pack_grad_out(grad_out, go_mat)
        _gemm_nt(&go_mat[0, 0], &cols[0, 0], &gw[0, 0, 0, 0],
                 <int>c_out, <int>q, <int>p)
    return gw_arr
