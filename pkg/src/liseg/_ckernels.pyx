# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: 3D im2col/col2im for convolution and the separable exact EDT.

Each function mirrors one in ``liseg._pykernels`` and must return identical values.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def im2col3d(const double[:, :, :, ::1] xp, int kd, int kh, int kw,
             int sd, int sh, int sw, int od, int oh, int ow):
    cdef Py_ssize_t C = xp.shape[0]
    cdef Py_ssize_t L = od * oh * ow
    cols_arr = np.empty((C * kd * kh * kw, L), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t c, a, b, e, d, h, w, row, col
    with nogil:
        row = 0
        for c in range(C):
            for a in range(kd):
                for b in range(kh):
                    for e in range(kw):
                        col = 0
                        for d in range(od):
                            for h in range(oh):
                                for w in range(ow):
                                    cols[row, col] = xp[c, d * sd + a, h * sh + b, w * sw + e]
                                    col += 1
                        row += 1
    return cols_arr


def col2im3d(const double[:, ::1] cols, int C, int Dp, int Hp, int Wp,
             int kd, int kh, int kw, int sd, int sh, int sw,
             int od, int oh, int ow):
    out_arr = np.zeros((C, Dp, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, a, b, e, d, h, w, row, col
    # accumulation order (kernel offset outer, voxel inner) matches the numpy fallback
    with nogil:
        row = 0
        for c in range(C):
            for a in range(kd):
                for b in range(kh):
                    for e in range(kw):
                        col = 0
                        for d in range(od):
                            for h in range(oh):
                                for w in range(ow):
                                    out[c, d * sd + a, h * sh + b, w * sw + e] += cols[row, col]
                                    col += 1
                        row += 1
    return out_arr


cdef void _envelope(double* f, double* out, Py_ssize_t n, double s2,
                    Py_ssize_t* v, double* z) noexcept nogil:
    # Lower envelope of parabolas s2*(q-p)^2 + f[p]; infinite f[p] are skipped.
    cdef Py_ssize_t k = -1, q, p
    cdef double sep
    for q in range(n):
        if f[q] == INFINITY:
            continue
        while k >= 0:
            p = v[k]
            sep = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
            if sep <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[k] = -INFINITY
        else:
            p = v[k - 1]
            z[k] = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        z[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            out[q] = INFINITY
        return
    cdef Py_ssize_t j = 0
    cdef double dq
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        dq = <double>(q - v[j])
        out[q] = s2 * dq * dq + f[v[j]]


def edt_sq(cnp.ndarray mask, spacing):
    """Squared Euclidean distance (mm^2) from each voxel to the nearest nonzero voxel."""
    cdef double[:, :, ::1] g = np.where(np.ascontiguousarray(mask) != 0, 0.0, np.inf)
    cdef Py_ssize_t D = g.shape[0], H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t n = max(D, H, W)
    cdef double[::1] fbuf = np.empty(n, dtype=np.float64)
    cdef double[::1] obuf = np.empty(n, dtype=np.float64)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.empty(n, dtype=np.intp)
    cdef double s0 = float(spacing[0]) ** 2
    cdef double s1 = float(spacing[1]) ** 2
    cdef double s2 = float(spacing[2]) ** 2
    cdef Py_ssize_t i, j, q
    with nogil:
        for i in range(H):
            for j in range(W):
                for q in range(D):
                    fbuf[q] = g[q, i, j]
                _envelope(&fbuf[0], &obuf[0], D, s0, &v[0], &z[0])
                for q in range(D):
                    g[q, i, j] = obuf[q]
        for i in range(D):
            for j in range(W):
                for q in range(H):
                    fbuf[q] = g[i, q, j]
                _envelope(&fbuf[0], &obuf[0], H, s1, &v[0], &z[0])
                for q in range(H):
                    g[i, q, j] = obuf[q]
        for i in range(D):
            for j in range(H):
                for q in range(W):
                    fbuf[q] = g[i, j, q]
                _envelope(&fbuf[0], &obuf[0], W, s2, &v[0], &z[0])
                for q in range(W):
                    g[i, j, q] = obuf[q]
    return np.asarray(g)
