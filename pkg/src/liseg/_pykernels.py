"""Pure numpy/Python versions of the compiled kernels in ``_ckernels.pyx``."""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    C = xp.shape[0]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(C * kd * kh * kw, od * oh * ow)


def col2im3d(cols, C, Dp, Hp, Wp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    out = np.zeros((C, Dp, Hp, Wp), dtype=np.float64)
    cols = cols.reshape(C, kd, kh, kw, od, oh, ow)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, a : a + (od - 1) * sd + 1 : sd, b : b + (oh - 1) * sh + 1 : sh, e : e + (ow - 1) * sw + 1 : sw] += cols[:, a, b, e]
    return out


def _envelope(f, s2):
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == math.inf:
            continue
        while k >= 0:
            p = v[k]
            sep = ((fq + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
            if sep <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[k] = -math.inf
        else:
            p = v[k - 1]
            z[k] = ((fq + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        z[k + 1] = math.inf
    if k < 0:
        return [math.inf] * n
    out = [0.0] * n
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        dq = float(q - v[j])
        out[q] = s2 * dq * dq + f[v[j]]
    return out


def edt_sq(mask, spacing):
    g = np.where(np.asarray(mask) != 0, 0.0, np.inf)
    for axis in range(3):
        s2 = float(spacing[axis]) ** 2
        moved = np.moveaxis(g, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        res = np.array([_envelope(row.tolist(), s2) for row in flat], dtype=np.float64)
        g = np.moveaxis(res.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(g)
