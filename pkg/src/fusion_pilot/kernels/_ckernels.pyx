# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, kh, kw, c), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, y, x, i, j, ch, sy, sx
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        sy = y * stride + i
                        for j in range(kw):
                            sx = x * stride + j
                            for ch in range(c):
                                cols[b, y, x, i, j, ch] = xp[b, sy, sx, ch]
    return out


def col2im(real[:, :, :, :, :, ::1] dcols, int hp, int wp, int stride):
    cdef Py_ssize_t n = dcols.shape[0], ho = dcols.shape[1], wo = dcols.shape[2]
    cdef Py_ssize_t kh = dcols.shape[3], kw = dcols.shape[4], c = dcols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] dxp = out
    cdef Py_ssize_t b, y, x, i, j, ch, sy, sx
    # loop order matches the numpy twin (kernel offset outermost) so float
    # accumulation order is identical
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for y in range(ho):
                        sy = y * stride + i
                        for x in range(wo):
                            sx = x * stride + j
                            for ch in range(c):
                                dxp[b, sy, sx, ch] += dcols[b, y, x, i, j, ch]
    return out


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


cdef inline void _insert(double* a, Py_ssize_t n, double v) noexcept nogil:
    # insert v into sorted a[0:n]
    cdef Py_ssize_t p = n
    while p > 0 and a[p - 1] > v:
        a[p] = a[p - 1]
        p -= 1
    a[p] = v


cdef inline void _remove(double* a, Py_ssize_t n, double v) noexcept nogil:
    # drop one copy of v from sorted a[0:n]
    cdef Py_ssize_t p = 0
    while p < n - 1 and a[p] != v:
        p += 1
    while p < n - 1:
        a[p] = a[p + 1]
        p += 1


def median_filter(double[:, ::1] img, int k):
    # Sliding sorted window per row: moving one pixel right swaps one column
    # of k values out and one in, instead of re-sorting k*k values.
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t r = k // 2, kk = k * k
    if kk > 225:
        raise ValueError(f"median window {k} too large")
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double buf[225]
    cdef Py_ssize_t rows[15]
    cdef Py_ssize_t y, x, i, j, m, c_out, c_in
    with nogil:
        for y in range(h):
            for i in range(k):
                rows[i] = _clamp(y + i - r, h - 1)
            m = 0
            for i in range(k):
                for j in range(-r, r + 1):
                    _insert(buf, m, img[rows[i], _clamp(j, w - 1)])
                    m += 1
            res[y, 0] = buf[kk // 2]
            for x in range(1, w):
                c_out = _clamp(x - r - 1, w - 1)
                c_in = _clamp(x + r, w - 1)
                if c_out != c_in:
                    for i in range(k):
                        _remove(buf, kk, img[rows[i], c_out])
                        _insert(buf, kk - 1, img[rows[i], c_in])
                res[y, x] = buf[kk // 2]
    return out


def inpaint_diffuse(values, missing, double tol, int max_iter):
    cur_arr = np.array(values, dtype=np.float64, copy=True)
    if not missing.any():
        return cur_arr, 0
    cdef double[:, ::1] cur = cur_arr
    ys, xs = np.nonzero(missing)
    cdef Py_ssize_t[::1] iy = ys.astype(np.intp)
    cdef Py_ssize_t[::1] ix = xs.astype(np.intp)
    cdef Py_ssize_t npix = iy.shape[0]
    new_arr = np.empty(npix, dtype=np.float64)
    cdef double[::1] new = new_arr
    cdef Py_ssize_t h = cur.shape[0], w = cur.shape[1]
    cdef Py_ssize_t q, y, x
    cdef int it
    cdef double s, cnt, delta, d
    with nogil:
        for it in range(1, max_iter + 1):
            delta = 0.0
            for q in range(npix):
                y = iy[q]
                x = ix[q]
                s = 0.0
                cnt = 0.0
                if y > 0:
                    s += cur[y - 1, x]
                    cnt += 1.0
                if y < h - 1:
                    s += cur[y + 1, x]
                    cnt += 1.0
                if x > 0:
                    s += cur[y, x - 1]
                    cnt += 1.0
                if x < w - 1:
                    s += cur[y, x + 1]
                    cnt += 1.0
                new[q] = s / cnt
                d = fabs(new[q] - cur[y, x])
                if d > delta:
                    delta = d
            for q in range(npix):
                cur[iy[q], ix[q]] = new[q]
            if delta < tol:
                break
    if it > max_iter:
        it = max_iter
    return cur_arr, it
