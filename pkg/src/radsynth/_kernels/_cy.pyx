# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: patch extraction/scatter for convolution, the
Perona-Malik update, and bilinear resampling."""

import numpy as np

from libc.math cimport exp, floor

ctypedef fused real:
    float
    double


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw):
    if x.dtype != np.float32 and x.dtype != np.float64:
        x = np.asarray(x, dtype=np.float64)
    return _im2col(np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw)


def col2im(cols, int n, int c, int h, int w, int kh, int kw, int sh, int sw, int ph, int pw):
    if cols.dtype != np.float32 and cols.dtype != np.float64:
        cols = np.asarray(cols, dtype=np.float64)
    return _col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, sh, sw, ph, pw)


def _im2col(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if real is float:
        out_np = np.zeros((n, c * kh * kw, oh * ow), dtype=np.float32)
    else:
        out_np = np.zeros((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t i, ci, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for i in range(n):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ci * kh + ki) * kw + kj
                        for oy in range(oh):
                            iy = oy * sh + ki - ph
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * sw + kj - pw
                                if ix < 0 or ix >= w:
                                    continue
                                out[i, row, oy * ow + ox] = x[i, ci, iy, ix]
    return out_np


def _col2im(real[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
            int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if real is float:
        out_np = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        out_np = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t i, ci, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for i in range(n):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ci * kh + ki) * kw + kj
                        for oy in range(oh):
                            iy = oy * sh + ki - ph
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * sw + kj - pw
                                if ix < 0 or ix >= w:
                                    continue
                                out[i, ci, iy, ix] += cols[i, row, oy * ow + ox]
    return out_np


def diffusion_step(img, double kappa, double dt, bint exponential):
    cdef double[:, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    out_np = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef Py_ssize_t y, x
    cdef double v, dn, ds, de, dw, acc, inv_k2 = 1.0 / (kappa * kappa)
    with nogil:
        for y in range(h):
            for x in range(w):
                v = src[y, x]
                dn = (src[y - 1, x] if y > 0 else v) - v
                ds = (src[y + 1, x] if y < h - 1 else v) - v
                de = (src[y, x + 1] if x < w - 1 else v) - v
                dw = (src[y, x - 1] if x > 0 else v) - v
                if exponential:
                    acc = (exp(-dn * dn * inv_k2) * dn + exp(-ds * ds * inv_k2) * ds
                           + exp(-de * de * inv_k2) * de + exp(-dw * dw * inv_k2) * dw)
                else:
                    acc = (dn / (1.0 + dn * dn * inv_k2) + ds / (1.0 + ds * ds * inv_k2)
                           + de / (1.0 + de * de * inv_k2) + dw / (1.0 + dw * dw * inv_k2))
                out[y, x] = v + dt * acc
    return out_np


def bilinear_resize(img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef double[:, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    out_np = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef double sy = h / <double>out_h, sx = w / <double>out_w
    cdef Py_ssize_t oy, ox, y0, x0, y1, x1
    cdef double fy, fx, yy, xx
    with nogil:
        for oy in range(out_h):
            yy = (oy + 0.5) * sy - 0.5
            if yy < 0.0:
                yy = 0.0
            if yy > h - 1.0:
                yy = h - 1.0
            y0 = <Py_ssize_t>floor(yy)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fy = yy - y0
            for ox in range(out_w):
                xx = (ox + 0.5) * sx - 0.5
                if xx < 0.0:
                    xx = 0.0
                if xx > w - 1.0:
                    xx = w - 1.0
                x0 = <Py_ssize_t>floor(xx)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                fx = xx - x0
                out[oy, ox] = ((src[y0, x0] * (1 - fx) + src[y0, x1] * fx) * (1 - fy)
                               + (src[y1, x0] * (1 - fx) + src[y1, x1] * fx) * fy)
    return out_np
