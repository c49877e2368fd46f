# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: radix-2 FFT rows and bilinear gather/scatter.

Mirrors ``dpcreg._fallback`` exactly; selected at import by ``dpcreg.kernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, cos, sin, M_PI

cnp.import_array()

_TABLES = {}


cdef object _tables(Py_ssize_t n):
    tab = _TABLES.get(n)
    if tab is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        k = np.arange(n // 2)
        tab = (perm, np.cos(2.0 * M_PI * k / n), np.sin(2.0 * M_PI * k / n))
        _TABLES[n] = tab
    return tab


def fft_rows(z, bint inverse=False):
    """Unnormalized radix-2 DFT along the last axis of a 2D complex array."""
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] src = np.ascontiguousarray(z, dtype=np.complex128)
    cdef Py_ssize_t rows = src.shape[0], n = src.shape[1]
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    perm_o, cos_o, sin_o = _tables(n)
    cdef Py_ssize_t[::1] perm = perm_o
    cdef double[::1] ctab = cos_o
    cdef double[::1] stab = sin_o
    out_o = np.empty((rows, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_o
    cdef double complex[:, ::1] inp = src
    cdef Py_ssize_t r, i, m, half, start, k, step
    cdef double sgn = 1.0 if inverse else -1.0
    cdef double complex w, e, o
    with nogil:
        for r in range(rows):
            for i in range(n):
                out[r, perm[i]] = inp[r, i]
            m = 2
            while m <= n:
                half = m // 2
                step = n // m
                start = 0
                while start < n:
                    for k in range(half):
                        w = ctab[k * step] + 1j * sgn * stab[k * step]
                        e = out[r, start + k]
                        o = out[r, start + k + half] * w
                        out[r, start + k] = e + o
                        out[r, start + k + half] = e - o
                    start += m
                m *= 2
    return out_o


def bilinear_gather(img, xs, ys):
    """Sample ``img[b]`` (B, H, W) at points (B, P); outside pixels read as 0."""
    cdef const double[:, :, :] im = np.asarray(img, dtype=np.float64)
    cdef const double[:, :] X = np.asarray(xs, dtype=np.float64)
    cdef const double[:, :] Y = np.asarray(ys, dtype=np.float64)
    cdef Py_ssize_t B = X.shape[0], P = X.shape[1], H = im.shape[1], W = im.shape[2]
    out_o = np.zeros((B, P), dtype=np.float64)
    cdef double[:, ::1] out = out_o
    cdef Py_ssize_t b, p, x0, y0, bi
    cdef double x, y, fx, fy, acc
    with nogil:
        for b in range(B):
            bi = b if im.shape[0] > 1 else 0
            for p in range(P):
                x = X[b, p]
                y = Y[b, p]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - x0
                fy = y - y0
                acc = 0.0
                if 0 <= y0 < H:
                    if 0 <= x0 < W:
                        acc += (1 - fx) * (1 - fy) * im[bi, y0, x0]
                    if 0 <= x0 + 1 < W:
                        acc += fx * (1 - fy) * im[bi, y0, x0 + 1]
                if 0 <= y0 + 1 < H:
                    if 0 <= x0 < W:
                        acc += (1 - fx) * fy * im[bi, y0 + 1, x0]
                    if 0 <= x0 + 1 < W:
                        acc += fx * fy * im[bi, y0 + 1, x0 + 1]
                out[b, p] = acc
    return out_o


def bilinear_scatter(grad, xs, ys, Py_ssize_t h, Py_ssize_t w):
    """Adjoint of :func:`bilinear_gather` with respect to the image."""
    cdef const double[:, :] G = np.asarray(grad, dtype=np.float64)
    cdef const double[:, :] X = np.asarray(xs, dtype=np.float64)
    cdef const double[:, :] Y = np.asarray(ys, dtype=np.float64)
    cdef Py_ssize_t B = G.shape[0], P = G.shape[1]
    out_o = np.zeros((B, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_o
    cdef Py_ssize_t b, p, x0, y0
    cdef double x, y, fx, fy, g
    with nogil:
        for b in range(B):
            for p in range(P):
                g = G[b, p]
                if g == 0.0:
                    continue
                x = X[b, p]
                y = Y[b, p]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - x0
                fy = y - y0
                if 0 <= y0 < h:
                    if 0 <= x0 < w:
                        out[b, y0, x0] += (1 - fx) * (1 - fy) * g
                    if 0 <= x0 + 1 < w:
                        out[b, y0, x0 + 1] += fx * (1 - fy) * g
                if 0 <= y0 + 1 < h:
                    if 0 <= x0 < w:
                        out[b, y0 + 1, x0] += (1 - fx) * fy * g
                    if 0 <= x0 + 1 < w:
                        out[b, y0 + 1, x0 + 1] += fx * fy * g
    return out_o


def bilinear_coord_grad(img, xs, ys, grad):
    """Gradient of ``sum(grad * gather(img, xs, ys))`` w.r.t. xs and ys."""
    cdef const double[:, :, :] im = np.asarray(img, dtype=np.float64)
    cdef const double[:, :] X = np.asarray(xs, dtype=np.float64)
    cdef const double[:, :] Y = np.asarray(ys, dtype=np.float64)
    cdef const double[:, :] G = np.asarray(grad, dtype=np.float64)
    cdef Py_ssize_t B = X.shape[0], P = X.shape[1], H = im.shape[1], W = im.shape[2]
    gx_o = np.zeros((B, P), dtype=np.float64)
    gy_o = np.zeros((B, P), dtype=np.float64)
    cdef double[:, ::1] gx = gx_o
    cdef double[:, ::1] gy = gy_o
    cdef Py_ssize_t b, p, x0, y0, bi
    cdef double x, y, fx, fy, v00, v01, v10, v11
    with nogil:
        for b in range(B):
            bi = b if im.shape[0] > 1 else 0
            for p in range(P):
                x = X[b, p]
                y = Y[b, p]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - x0
                fy = y - y0
                v00 = v01 = v10 = v11 = 0.0
                if 0 <= y0 < H:
                    if 0 <= x0 < W:
                        v00 = im[bi, y0, x0]
                    if 0 <= x0 + 1 < W:
                        v01 = im[bi, y0, x0 + 1]
                if 0 <= y0 + 1 < H:
                    if 0 <= x0 < W:
                        v10 = im[bi, y0 + 1, x0]
                    if 0 <= x0 + 1 < W:
                        v11 = im[bi, y0 + 1, x0 + 1]
                gx[b, p] = G[b, p] * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                gy[b, p] = G[b, p] * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
    return gx_o, gy_o
