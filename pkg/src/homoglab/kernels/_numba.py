"""Numba-compiled hot kernels. Signatures mirror ``_numpy`` exactly."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def csr_matvec(data, indices, indptr, x):
    n_rows = indptr.shape[0] - 1
    y = np.empty(n_rows, dtype=np.float64)
    for i in range(n_rows):
        acc = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            acc += data[jj] * x[indices[jj]]
        y[i] = acc
    return y


@njit(cache=True, nogil=True)
def trig_eval(points, mean, freqs, cos_amp, sin_amp):
    npts = points.shape[0]
    n_modes = freqs.shape[0]
    n_ent = mean.shape[0]
    d = points.shape[1]
    out = np.empty((npts, n_ent), dtype=np.float64)
    for p in range(npts):
        for e in range(n_ent):
            out[p, e] = mean[e]
        for k in range(n_modes):
            phase = 0.0
            for ax in range(d):
                phase += freqs[k, ax] * points[p, ax]
            c = np.cos(phase)
            s = np.sin(phase)
            for e in range(n_ent):
                out[p, e] += c * cos_amp[k, e] + s * sin_amp[k, e]
    return out


@njit(cache=True, nogil=True)
def shift_inf(cos_p, sin_p, cos_amp, sin_amp, phase_y, phase_z):
    n_win = cos_p.shape[0]
    n_modes = cos_p.shape[1]
    n_ent = cos_amp.shape[1]
    n_z = phase_z.shape[0]
    p = np.empty((n_modes, n_ent), dtype=np.float64)
    q = np.empty((n_modes, n_ent), dtype=np.float64)
    best = np.inf
    best_iz = 0
    for iz in range(n_z):
        for k in range(n_modes):
            alpha = np.cos(phase_y[k]) - np.cos(phase_z[iz, k])
            beta = np.sin(phase_y[k]) - np.sin(phase_z[iz, k])
            for e in range(n_ent):
                p[k, e] = cos_amp[k, e] * alpha + sin_amp[k, e] * beta
                q[k, e] = sin_amp[k, e] * alpha - cos_amp[k, e] * beta
        sup = 0.0
        for ix in range(n_win):
            for e in range(n_ent):
                acc = 0.0
                for k in range(n_modes):
                    acc += cos_p[ix, k] * p[k, e] + sin_p[ix, k] * q[k, e]
                a = abs(acc)
                if a > sup:
                    sup = a
            # this z can no longer beat the best shift found so far
            if sup >= best:
                break
        if sup < best:
            best = sup
            best_iz = iz
    return best, best_iz


@njit(cache=True, nogil=True)
def interp_periodic(values, n_axis, origin, h, points):
    d = n_axis.shape[0]
    npts = points.shape[0]
    n_comp = values.shape[1]
    strides = np.ones(d, dtype=np.int64)
    for ax in range(d - 2, -1, -1):
        strides[ax] = strides[ax + 1] * n_axis[ax + 1]
    out = np.zeros((npts, n_comp), dtype=np.float64)
    i0 = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    for pt in range(npts):
        for ax in range(d):
            t = (points[pt, ax] - origin[ax]) / h[ax]
            f = np.floor(t)
            i0[ax] = int(f) % n_axis[ax]
            frac[ax] = t - f
        for corner in range(1 << d):
            idx = 0
            w = 1.0
            for ax in range(d):
                hi = (corner >> ax) & 1
                k = (i0[ax] + hi) % n_axis[ax]
                idx += k * strides[ax]
                w *= frac[ax] if hi else 1.0 - frac[ax]
            for c in range(n_comp):
                out[pt, c] += w * values[idx, c]
    return out
