# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same API as ``_pure``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor

cnp.import_array()

BACKEND = "cython"


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    cdef Py_ssize_t n, o, c, i, j, yy, xx, sy, sx, ylo, yhi, xlo, xhi
    cdef double wv
    out_arr = np.empty((N, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    for n in range(N):
        for o in range(O):
            for yy in range(Ho):
                for xx in range(Wo):
                    out[n, o, yy, xx] = b[o]
            for c in range(C):
                for i in range(k):
                    # output rows whose source row yy + i - pad is in range
                    ylo = pad - i if pad - i > 0 else 0
                    yhi = H + pad - i if H + pad - i < Ho else Ho
                    for j in range(k):
                        xlo = pad - j if pad - j > 0 else 0
                        xhi = W + pad - j if W + pad - j < Wo else Wo
                        wv = w[o, c, i, j]
                        for yy in range(ylo, yhi):
                            sy = yy + i - pad
                            for xx in range(xlo, xhi):
                                out[n, o, yy, xx] += wv * x[n, c, sy, xx + j - pad]
    return out_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[:, :, :, ::1] dy, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = dy.shape[2], Wo = dy.shape[3]
    cdef Py_ssize_t n, o, c, i, j, yy, xx, sy, ylo, yhi, xlo, xhi
    cdef double wv, acc, g
    dx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    dw_arr = np.zeros((O, C, k, k), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    for n in range(N):
        for o in range(O):
            acc = 0.0
            for yy in range(Ho):
                for xx in range(Wo):
                    acc += dy[n, o, yy, xx]
            db[o] += acc
            for c in range(C):
                for i in range(k):
                    ylo = pad - i if pad - i > 0 else 0
                    yhi = H + pad - i if H + pad - i < Ho else Ho
                    for j in range(k):
                        xlo = pad - j if pad - j > 0 else 0
                        xhi = W + pad - j if W + pad - j < Wo else Wo
                        wv = w[o, c, i, j]
                        acc = 0.0
                        for yy in range(ylo, yhi):
                            sy = yy + i - pad
                            for xx in range(xlo, xhi):
                                g = dy[n, o, yy, xx]
                                acc += g * x[n, c, sy, xx + j - pad]
                                dx[n, c, sy, xx + j - pad] += wv * g
                        dw[o, c, i, j] += acc
    return dx_arr, dw_arr, db_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    cdef Py_ssize_t n, c, yy, xx, q, best
    cdef double v, m
    y_arr = np.empty((N, C, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((N, C, Ho, Wo), dtype=np.int8)
    cdef double[:, :, :, ::1] y = y_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    for n in range(N):
        for c in range(C):
            for yy in range(Ho):
                for xx in range(Wo):
                    m = x[n, c, 2 * yy, 2 * xx]
                    best = 0
                    for q in range(1, 4):
                        v = x[n, c, 2 * yy + q // 2, 2 * xx + q % 2]
                        if v > m:
                            m = v
                            best = q
                    y[n, c, yy, xx] = m
                    idx[n, c, yy, xx] = <cnp.int8_t>best
    return y_arr, idx_arr


def maxpool2_backward(double[:, :, :, ::1] dy, cnp.int8_t[:, :, :, ::1] idx, in_shape):
    cdef Py_ssize_t N = dy.shape[0], C = dy.shape[1], Ho = dy.shape[2], Wo = dy.shape[3]
    cdef Py_ssize_t n, c, yy, xx, q
    dx_arr = np.zeros(tuple(in_shape), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    for n in range(N):
        for c in range(C):
            for yy in range(Ho):
                for xx in range(Wo):
                    q = idx[n, c, yy, xx]
                    dx[n, c, 2 * yy + q // 2, 2 * xx + q % 2] = dy[n, c, yy, xx]
    return dx_arr


def rotate_bilinear(double[:, :, ::1] vol, double angle_rad):
    cdef Py_ssize_t D = vol.shape[0], H = vol.shape[1], W = vol.shape[2]
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef double c = cos(angle_rad), s = sin(angle_rad)
    cdef Py_ssize_t d, r, q, y0, x0, y1, x1
    cdef double dyv, dxv, sy, sx, fy, fx
    out_arr = np.zeros((D, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for r in range(H):
        dyv = r - cy
        for q in range(W):
            dxv = q - cx
            sy = cy + c * dyv - s * dxv
            sx = cx + s * dyv + c * dxv
            if sy < 0 or sy > H - 1 or sx < 0 or sx > W - 1:
                continue
            y0 = <Py_ssize_t>floor(sy)
            x0 = <Py_ssize_t>floor(sx)
            fy = sy - y0
            fx = sx - x0
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            x1 = x0 + 1 if x0 + 1 < W else W - 1
            for d in range(D):
                out[d, r, q] = ((1 - fy) * (1 - fx) * vol[d, y0, x0] + (1 - fy) * fx * vol[d, y0, x1]
                                + fy * (1 - fx) * vol[d, y1, x0] + fy * fx * vol[d, y1, x1])
    return out_arr
